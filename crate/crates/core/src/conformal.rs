//! Mondrian conformal predictive system on top of the squared-error ensemble.
//!
//! Calibration residuals are grouped by bins of the base prediction, so the
//! predictive spread can change with the predicted level.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boosting::{gbt_fit, BoostParams, FeatureTable, GbtEnsemble};
use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::metrics::{crps_step, CrpsScore, StepCdf};

pub const DEFAULT_BINS: usize = 5;
pub const DEFAULT_MIN_CAL: usize = 50;
pub const DEFAULT_CAL_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsModel {
    pub base: GbtEnsemble,
    /// Category `b` holds predictions in `[edges[b-1], edges[b])`.
    pub edges: Vec<f64>,
    /// Sorted `y - ŷ` per category.
    pub residuals: Vec<Vec<f64>>,
}

impl CpsModel {
    pub fn n_categories(&self) -> usize {
        self.residuals.len()
    }

    pub fn category_of(&self, yhat: f64) -> usize {
        self.edges.partition_point(|&e| e <= yhat)
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<CpsDistribution> {
        if x.len() != self.base.n_features {
            return Err(Error::Shape {
                expected: self.base.n_features,
                actual: x.len(),
            });
        }
        let point = self.base.predict_row(x);
        Ok(CpsDistribution::from_residuals(
            point,
            &self.residuals[self.category_of(point)],
        ))
    }

    pub fn predict(&self, x: &FeatureTable) -> Result<Vec<CpsDistribution>> {
        (0..x.rows).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// Merge the bin with the fewest members into its smaller neighbour until
/// every bin holds at least `min_cal`. Ties go to the leftmost choice.
fn merge_small(mut sizes: Vec<usize>, mut edges: Vec<f64>, min_cal: usize) -> (Vec<usize>, Vec<f64>) {
    while sizes.len() > 1 {
        let (b, &smallest) = sizes
            .iter()
            .enumerate()
            .min_by_key(|&(i, s)| (*s, i))
            .expect("non-empty");
        if smallest >= min_cal {
            break;
        }
        let left = if b == 0 {
            false
        } else if b + 1 == sizes.len() {
            true
        } else {
            sizes[b - 1] <= sizes[b + 1]
        };
        let (keep, gone) = if left { (b - 1, b) } else { (b, b + 1) };
        sizes[keep] += sizes[gone];
        sizes.remove(gone);
        edges.remove(keep);
    }
    (sizes, edges)
}

/// Calibrate a Mondrian CPS from held-out data.
pub fn cps_calibrate(
    base: GbtEnsemble,
    x_cal: &FeatureTable,
    y_cal: &[f64],
    n_bins: usize,
    min_cal: usize,
) -> Result<CpsModel> {
    if n_bins == 0 || min_cal == 0 {
        return Err(Error::Config("n_bins and min_cal must be positive".into()));
    }
    if y_cal.len() != x_cal.rows {
        return Err(Error::LengthMismatch(y_cal.len(), x_cal.rows));
    }
    let needed = n_bins * min_cal;
    if y_cal.len() < needed {
        return Err(Error::InsufficientCalibration {
            needed,
            got: y_cal.len(),
        });
    }
    if y_cal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("calibration targets must be finite".into()));
    }
    let yhat = base.predict(x_cal)?;
    let mut sorted = yhat.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();

    // equal-frequency cut positions, moved forward past ties
    let mut edges: Vec<f64> = Vec::new();
    for b in 1..n_bins {
        let mut p = b * n / n_bins;
        while p < n && p > 0 && sorted[p] == sorted[p - 1] {
            p += 1;
        }
        if p < n && edges.last().is_none_or(|&e| sorted[p] > e) {
            edges.push(sorted[p]);
        }
    }
    let count = |lo: f64, hi: f64| sorted.iter().filter(|&&v| v >= lo && v < hi).count();
    let bounds: Vec<f64> = std::iter::once(f64::NEG_INFINITY)
        .chain(edges.iter().copied())
        .chain(std::iter::once(f64::INFINITY))
        .collect();
    let sizes: Vec<usize> = bounds.windows(2).map(|w| count(w[0], w[1])).collect();
    let (_, edges) = merge_small(sizes, edges, min_cal);

    let mut residuals = vec![Vec::new(); edges.len() + 1];
    for (p, y) in yhat.iter().zip(y_cal) {
        residuals[edges.partition_point(|&e| e <= *p)].push(y - p);
    }
    for r in &mut residuals {
        r.sort_by(f64::total_cmp);
    }
    Ok(CpsModel { base, edges, residuals })
}

/// Seeded split of row indices into (train, calibration). Each stratum
/// contributes `round(fraction * size)` calibration rows.
pub fn calibration_split<S: Ord + Clone>(strata: &[S], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("calibration fraction {fraction} outside (0, 1)")));
    }
    let mut groups: BTreeMap<S, Vec<usize>> = BTreeMap::new();
    for (i, s) in strata.iter().enumerate() {
        groups.entry(s.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut cal) = (Vec::new(), Vec::new());
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        cal.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    cal.sort_unstable();
    Ok((train, cal))
}

/// Fit the base ensemble on a seeded training share and calibrate on the
/// rest. The bin count shrinks when the calibration share cannot fill
/// `n_bins` categories.
pub fn cps_fit<S: Ord + Clone>(
    x: &FeatureTable,
    y: &[f64],
    strata: &[S],
    params: &BoostParams,
    n_bins: usize,
    min_cal: usize,
    seed: u64,
) -> Result<CpsModel> {
    if strata.len() != x.rows || y.len() != x.rows {
        return Err(Error::LengthMismatch(strata.len().min(y.len()), x.rows));
    }
    let (train, cal) = calibration_split(strata, DEFAULT_CAL_FRACTION, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
    let base = gbt_fit(&x.select(&train), &pick(&train), params)?;
    let bins = n_bins.min(cal.len() / min_cal.max(1)).max(1);
    cps_calibrate(base, &x.select(&cal), &pick(&cal), bins, min_cal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsDistribution {
    pub point: f64,
    atoms: Vec<f64>,
}

impl CpsDistribution {
    /// `residuals` must be sorted ascending and non-empty.
    pub fn from_residuals(point: f64, residuals: &[f64]) -> Self {
        debug_assert!(!residuals.is_empty());
        debug_assert!(residuals.windows(2).all(|w| w[0] <= w[1]));
        Self {
            point,
            atoms: residuals.iter().map(|r| point + r).collect(),
        }
    }

    fn n_plus_one(&self) -> f64 {
        (self.atoms.len() + 1) as f64
    }

    pub fn interval(&self, coverage: f64) -> Result<(f64, f64)> {
        cps_interval(self, coverage)
    }

    pub fn export(&self) -> DistributionExport {
        let q = |t: f64| self.quantile(t);
        DistributionExport {
            point: self.point,
            quantiles: [0.05, 0.25, 0.5, 0.75, 0.95]
                .map(|t| (format!("{t:.2}"), q(t)))
                .into_iter()
                .collect(),
            interval: self.central_interval(0.9),
        }
    }
}

impl StepCdf for CpsDistribution {
    fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    fn cdf_after(&self, i: usize) -> f64 {
        if i + 1 >= self.atoms.len() {
            1.0
        } else {
            (i + 1) as f64 / self.n_plus_one()
        }
    }
}

impl PredictiveDistribution for CpsDistribution {
    fn cdf(&self, y: f64) -> f64 {
        let below = self.atoms.partition_point(|&a| a <= y);
        if below == self.atoms.len() {
            1.0
        } else {
            below as f64 / self.n_plus_one()
        }
    }

    fn quantile(&self, tau: f64) -> f64 {
        let k = (tau * self.n_plus_one() - 1e-9).ceil() - 1.0;
        let k = k.clamp(0.0, (self.atoms.len() - 1) as f64) as usize;
        self.atoms[k]
    }
}

impl CrpsScore for CpsDistribution {
    fn crps(&self, y: f64) -> f64 {
        crps_step(self, y)
    }
}

pub fn cps_interval(dist: &CpsDistribution, coverage: f64) -> Result<(f64, f64)> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::Domain(format!("coverage {coverage} outside (0, 1)")));
    }
    Ok(dist.central_interval(coverage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionExport {
    pub point: f64,
    pub quantiles: BTreeMap<String, f64>,
    pub interval: (f64, f64),
}
