//! Context-free reference models: a city-wide lognormal and a k-ring
//! lognormal pooled from neighbouring hexagons, both fit by quantile matching.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::geo::Axial;
pub use crate::special::inv_norm_cdf;
use crate::special::norm_cdf;

pub const DEFAULT_TAU_LO: f64 = 0.5;
pub const DEFAULT_TAU_HI: f64 = 0.9;
pub const MIN_FIT_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedLognormal {
    /// Location on the log scale (ln-seconds).
    pub mu: f64,
    pub sigma: f64,
}

impl FittedLognormal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Domain(format!("invalid lognormal (mu={mu}, sigma={sigma})")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mean(&self) -> f64 {
        (self.mu + 0.5 * self.sigma * self.sigma).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.mu + self.sigma * z).exp()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let z = (y.ln() - self.mu) / self.sigma;
        (-0.5 * z * z).exp() / (y * self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }
}

impl PredictiveDistribution for FittedLognormal {
    fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        norm_cdf((y.ln() - self.mu) / self.sigma)
    }

    fn quantile(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        if tau >= 1.0 {
            return f64::INFINITY;
        }
        let z = inv_norm_cdf(tau).expect("tau checked to lie in (0, 1)");
        (self.mu + self.sigma * z).exp()
    }

    fn median(&self) -> f64 {
        self.mu.exp()
    }
}

/// Type-7 (linear interpolation) empirical quantile of an ascending slice.
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Lognormal whose quantiles at `tau_lo` and `tau_hi` equal the given values.
pub fn lognormal_from_quantiles(q_lo: f64, q_hi: f64, tau_lo: f64, tau_hi: f64) -> Result<FittedLognormal> {
    if !(q_lo > 0.0 && q_hi > 0.0) {
        return Err(Error::Domain("quantiles must be positive".into()));
    }
    if !(tau_lo < tau_hi) {
        return Err(Error::Domain(format!("need tau_lo < tau_hi, got {tau_lo}, {tau_hi}")));
    }
    if q_hi <= q_lo {
        return Err(Error::DegenerateSample(q_lo));
    }
    let (z_lo, z_hi) = (inv_norm_cdf(tau_lo)?, inv_norm_cdf(tau_hi)?);
    let sigma = (q_hi.ln() - q_lo.ln()) / (z_hi - z_lo);
    let mu = q_lo.ln() - z_lo * sigma;
    FittedLognormal::new(mu, sigma)
}

pub fn fit_quantile_match(samples: &[f64], tau_lo: f64, tau_hi: f64) -> Result<FittedLognormal> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "quantile matching needs {MIN_FIT_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("service time {bad} is not positive")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q_lo = empirical_quantile(&sorted, tau_lo);
    let q_hi = empirical_quantile(&sorted, tau_hi);
    lognormal_from_quantiles(q_lo, q_hi, tau_lo, tau_hi)
}

/// One lognormal for the whole city, ignoring location.
pub fn city_model(service_times: &[f64]) -> Result<FittedLognormal> {
    fit_quantile_match(service_times, DEFAULT_TAU_LO, DEFAULT_TAU_HI)
}

/// Service times grouped by hexagon.
#[derive(Debug, Clone, Default)]
pub struct CellTimes {
    by_cell: HashMap<Axial, Vec<f64>>,
}

impl CellTimes {
    pub fn new<I: IntoIterator<Item = (Axial, f64)>>(items: I) -> Self {
        let mut by_cell: HashMap<Axial, Vec<f64>> = HashMap::new();
        for (cell, t) in items {
            by_cell.entry(cell).or_default().push(t);
        }
        Self { by_cell }
    }

    pub fn cell(&self, c: Axial) -> &[f64] {
        self.by_cell.get(&c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.by_cell.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every time, ordered by cell so the result does not depend on hashing.
    pub fn all_times(&self) -> Vec<f64> {
        let mut cells: Vec<_> = self.by_cell.keys().copied().collect();
        cells.sort();
        cells.iter().flat_map(|c| self.by_cell[c].iter().copied()).collect()
    }

    fn pool(&self, center: Axial, k: u32) -> Vec<f64> {
        center
            .spiral(k)
            .into_iter()
            .flat_map(|c| self.cell(c).iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KringFit {
    pub dist: FittedLognormal,
    /// Ring radius that supplied the pool; `None` when the city model was used.
    pub k_used: Option<u32>,
    pub n_samples: usize,
    pub fallback_used: bool,
}

/// Lognormal fit to the deliveries within `k` rings of `cell`. Sparse pools
/// widen to `k + 1`, then `k + 2`, then fall back to the city-wide model.
pub fn kring_model(cell: Axial, times: &CellTimes, k: u32, min_n: usize) -> Result<KringFit> {
    let min_n = min_n.max(MIN_FIT_SAMPLES);
    for radius in k..=k + 2 {
        let pool = times.pool(cell, radius);
        if pool.len() >= min_n {
            match city_model(&pool) {
                Ok(dist) => {
                    return Ok(KringFit {
                        dist,
                        k_used: Some(radius),
                        n_samples: pool.len(),
                        fallback_used: radius != k,
                    })
                }
                Err(Error::DegenerateSample(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    let all = times.all_times();
    let dist = city_model(&all).map_err(|e| Error::InsufficientData(format!("k-ring city fallback failed: {e}")))?;
    Ok(KringFit {
        dist,
        k_used: None,
        n_samples: all.len(),
        fallback_used: true,
    })
}

/// JSON export of a fitted lognormal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LognormalExport {
    #[serde(rename = "type")]
    pub kind: String,
    pub mu: f64,
    pub sigma: f64,
    pub fallback_used: bool,
    pub n_samples: usize,
}

impl LognormalExport {
    pub fn city(dist: FittedLognormal, n_samples: usize) -> Self {
        Self {
            kind: "city".into(),
            mu: dist.mu,
            sigma: dist.sigma,
            fallback_used: false,
            n_samples,
        }
    }

    pub fn kring(fit: &KringFit) -> Self {
        Self {
            kind: "kring".into(),
            mu: fit.dist.mu,
            sigma: fit.dist.sigma,
            fallback_used: fit.fallback_used,
            n_samples: fit.n_samples,
        }
    }
}
