//! Hexagon-level cross-validation, training schemes across cities, and
//! exceedance-probability maps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{city_model, kring_model, CellTimes, FittedLognormal, LognormalExport};
use crate::boosting::{lss_fit, BoostParams, FeatureTable, LssEnsemble, ModelCheckpoint};
use crate::conformal::{cps_fit, CpsDistribution, CpsModel, DEFAULT_BINS, DEFAULT_MIN_CAL};
use crate::dist::PredictiveDistribution;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::geo::{Axial, Tessellation};
use crate::ingest::{load_deliveries_csv, read_json, DeliveryRecord, RegionFeatureMatrix};
use crate::metrics::{score_fold, CrpsScore, EvalReport, FoldScores};

pub const TESSELLATION_FILE: &str = "tessellation.json";
pub const FEATURES_FILE: &str = "features.json";
pub const DELIVERIES_FILE: &str = "deliveries.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const DEFAULT_THRESHOLDS: [f64; 3] = [150.0, 300.0, 600.0];

/// Everything known about one city.
#[derive(Debug, Clone)]
pub struct CityData {
    pub city_id: String,
    pub tess: Tessellation,
    pub features: Option<RegionFeatureMatrix>,
    pub embeddings: Option<EmbeddingMatrix>,
    pub deliveries: Vec<DeliveryRecord>,
}

impl CityData {
    /// Reads a city directory: `tessellation.json` and `deliveries.csv` are
    /// required; `features.json` and `embeddings.csv` are picked up if present.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let ctx = |e: Error| e.context(format!("loading city from {}", dir.display()));
        let tess: Tessellation = read_json(&dir.join(TESSELLATION_FILE)).map_err(ctx)?;
        tess.validate().map_err(ctx)?;
        let loaded = load_deliveries_csv(&dir.join(DELIVERIES_FILE), &tess).map_err(ctx)?;
        if !loaded.rejected.is_empty() {
            eprintln!(
                "{}: skipped {} invalid delivery rows",
                tess.city_id,
                loaded.rejected.len()
            );
        }
        let fpath = dir.join(FEATURES_FILE);
        let features = if fpath.exists() {
            Some(RegionFeatureMatrix::read_json(&fpath).map_err(ctx)?)
        } else {
            None
        };
        let epath = dir.join(EMBEDDINGS_FILE);
        let embeddings = if epath.exists() {
            let f = std::fs::File::open(&epath)?;
            Some(EmbeddingMatrix::read_csv(f, &tess.city_id).map_err(ctx)?)
        } else {
            None
        };
        Ok(Self {
            city_id: tess.city_id.clone(),
            tess,
            features,
            embeddings,
            deliveries: loaded.records,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub test_hexes: BTreeSet<Axial>,
    pub train_hexes: BTreeSet<Axial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffle the distinct hexes holding deliveries and deal them into `k`
/// near-equal test groups.
pub fn hex_kfold(deliveries: &[DeliveryRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    let hexes: BTreeSet<Axial> = deliveries.iter().map(|d| d.cell).collect();
    if hexes.len() < k {
        return Err(Error::TooFewHexes {
            needed: k,
            got: hexes.len(),
        });
    }
    let mut order: Vec<Axial> = hexes.iter().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / k, order.len() % k);
    let mut start = 0;
    let folds = (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let test: BTreeSet<Axial> = order[start..start + len].iter().copied().collect();
            start += len;
            Fold {
                train_hexes: hexes.difference(&test).copied().collect(),
                test_hexes: test,
            }
        })
        .collect();
    Ok(FoldPlan { k, seed, folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Scheme {
    CitySpecific,
    Transfer,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub scheme: Scheme,
    pub target_city: String,
    pub source_cities: Vec<String>,
}

impl SchemeSpec {
    /// Resolve training sources from the cities on hand.
    pub fn resolve(scheme: Scheme, target_city: &str, cities: &[String]) -> Result<Self> {
        if !cities.iter().any(|c| c == target_city) {
            return Err(Error::Config(format!("target city {target_city:?} not in corpus")));
        }
        let others: Vec<String> = cities.iter().filter(|c| *c != target_city).cloned().collect();
        let source_cities = match scheme {
            Scheme::CitySpecific => vec![target_city.to_string()],
            Scheme::Transfer | Scheme::Full if others.is_empty() => {
                return Err(Error::Config(format!(
                    "{scheme:?} scheme needs at least one city besides {target_city:?}"
                )))
            }
            Scheme::Transfer => others,
            Scheme::Full => {
                let mut all = others;
                all.push(target_city.to_string());
                all
            }
        };
        Ok(Self {
            scheme,
            target_city: target_city.to_string(),
            source_cities,
        })
    }

    pub fn trains_on_target(&self) -> bool {
        self.scheme != Scheme::Transfer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModelKind {
    City,
    Kring3,
    CpsGeo,
    LssGeo,
    LssOsm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::City => "city",
            ModelKind::Kring3 => "kring3",
            ModelKind::CpsGeo => "cps_geo",
            ModelKind::LssGeo => "lss_geo",
            ModelKind::LssOsm => "lss_osm",
        }
    }

    pub fn default_features(self) -> Option<FeatureSource> {
        match self {
            ModelKind::City | ModelKind::Kring3 => None,
            ModelKind::CpsGeo | ModelKind::LssGeo => Some(FeatureSource::Embedding),
            ModelKind::LssOsm => Some(FeatureSource::OsmCounts),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FeatureSource {
    Embedding,
    OsmCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub boost: BoostParams,
    pub n_bins: usize,
    pub min_cal: usize,
    pub kring_k: u32,
    pub kring_min_n: usize,
    pub seed: u64,
}

impl ModelOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            boost: BoostParams::default(),
            n_bins: DEFAULT_BINS,
            min_cal: DEFAULT_MIN_CAL,
            kring_k: 3,
            kring_min_n: 30,
            seed,
        }
    }
}

fn city<'a>(corpus: &'a [CityData], id: &str) -> Result<&'a CityData> {
    corpus
        .iter()
        .find(|c| c.city_id == id)
        .ok_or_else(|| Error::Config(format!("city {id:?} not in corpus")))
}

/// Feature vector of one cell.
pub fn cell_features(c: &CityData, cell: Axial, source: FeatureSource) -> Result<Vec<f64>> {
    let missing = |what: &str| Error::Config(format!("no {what} row for cell {cell} in city {:?}", c.city_id));
    match source {
        FeatureSource::Embedding => {
            let e = c.embeddings.as_ref().ok_or_else(|| missing("embedding"))?;
            let i = e
                .cells
                .iter()
                .position(|x| *x == cell)
                .ok_or_else(|| missing("embedding"))?;
            Ok(e.row(i).to_vec())
        }
        FeatureSource::OsmCounts => {
            let m = c.features.as_ref().ok_or_else(|| missing("feature"))?;
            let row = m.row_of(cell).ok_or_else(|| missing("feature"))?;
            Ok(row.iter().map(|&v| f64::from(v)).collect())
        }
    }
}

/// Per-city cell lookup so large training sets avoid repeated scans.
struct FeatureCache<'a> {
    source: FeatureSource,
    corpus: &'a [CityData],
    rows: HashMap<(String, Axial), Vec<f64>>,
}

impl<'a> FeatureCache<'a> {
    fn new(corpus: &'a [CityData], source: FeatureSource) -> Self {
        Self {
            source,
            corpus,
            rows: HashMap::new(),
        }
    }

    fn get(&mut self, city_id: &str, cell: Axial) -> Result<&[f64]> {
        let key = (city_id.to_string(), cell);
        if !self.rows.contains_key(&key) {
            let row = cell_features(city(self.corpus, city_id)?, cell, self.source)?;
            self.rows.insert(key.clone(), row);
        }
        Ok(&self.rows[&key])
    }

    fn table(&mut self, records: &[&DeliveryRecord]) -> Result<FeatureTable> {
        let mut values = Vec::new();
        let mut width = None;
        for d in records {
            let row = self.get(&d.city_id, d.cell)?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Shape {
                        expected: w,
                        actual: row.len(),
                    })
                }
                _ => {}
            }
            values.extend_from_slice(row);
        }
        FeatureTable::new(records.len(), width.unwrap_or(0), values)
    }
}

/// A fitted model of any kind.
#[derive(Debug, Clone)]
pub enum FittedModel {
    City(FittedLognormal),
    Kring {
        /// Target-city training times; rings are drawn from these.
        times: CellTimes,
        k: u32,
        min_n: usize,
        fallback: FittedLognormal,
    },
    Lss {
        model: LssEnsemble,
        features: FeatureSource,
    },
    Cps {
        model: CpsModel,
        features: FeatureSource,
    },
}

/// Predictive distribution from any model kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDistribution {
    Lognormal(FittedLognormal),
    Cps(CpsDistribution),
}

impl PredictiveDistribution for AnyDistribution {
    fn cdf(&self, y: f64) -> f64 {
        match self {
            AnyDistribution::Lognormal(d) => d.cdf(y),
            AnyDistribution::Cps(d) => d.cdf(y),
        }
    }

    fn quantile(&self, tau: f64) -> f64 {
        match self {
            AnyDistribution::Lognormal(d) => d.quantile(tau),
            AnyDistribution::Cps(d) => d.quantile(tau),
        }
    }
}

impl CrpsScore for AnyDistribution {
    fn crps(&self, y: f64) -> f64 {
        match self {
            AnyDistribution::Lognormal(d) => d.crps(y),
            AnyDistribution::Cps(d) => d.crps(y),
        }
    }
}

/// Fit `kind` on `train`, predicting later for cells of `target`.
pub fn fit_model(
    corpus: &[CityData],
    target: &str,
    train: &[&DeliveryRecord],
    kind: ModelKind,
    features: Option<FeatureSource>,
    opts: &ModelOptions,
) -> Result<FittedModel> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training deliveries".into()));
    }
    let ys: Vec<f64> = train.iter().map(|d| d.service_time_s).collect();
    let features = features.or(kind.default_features());
    Ok(match kind {
        ModelKind::City => FittedModel::City(city_model(&ys)?),
        ModelKind::Kring3 => FittedModel::Kring {
            times: CellTimes::new(
                train
                    .iter()
                    .filter(|d| d.city_id == target)
                    .map(|d| (d.cell, d.service_time_s)),
            ),
            k: opts.kring_k,
            min_n: opts.kring_min_n,
            fallback: city_model(&ys)?,
        },
        ModelKind::LssGeo | ModelKind::LssOsm | ModelKind::CpsGeo => {
            let source = features.expect("feature models have a default source");
            let x = FeatureCache::new(corpus, source).table(train)?;
            if kind == ModelKind::CpsGeo {
                let strata: Vec<&str> = train.iter().map(|d| d.city_id.as_str()).collect();
                FittedModel::Cps {
                    model: cps_fit(&x, &ys, &strata, &opts.boost, opts.n_bins, opts.min_cal, opts.seed)?,
                    features: source,
                }
            } else {
                FittedModel::Lss {
                    model: lss_fit(&x, &ys, &opts.boost)?.model,
                    features: source,
                }
            }
        }
    })
}

impl FittedModel {
    pub fn predict_cell(&self, c: &CityData, cell: Axial) -> Result<AnyDistribution> {
        Ok(match self {
            FittedModel::City(d) => AnyDistribution::Lognormal(*d),
            FittedModel::Kring {
                times,
                k,
                min_n,
                fallback,
            } => {
                if times.is_empty() {
                    AnyDistribution::Lognormal(*fallback)
                } else {
                    AnyDistribution::Lognormal(kring_model(cell, times, *k, *min_n)?.dist)
                }
            }
            FittedModel::Lss { model, features } => {
                AnyDistribution::Lognormal(model.predict_row(&cell_features(c, cell, *features)?)?)
            }
            FittedModel::Cps { model, features } => {
                AnyDistribution::Cps(model.predict_row(&cell_features(c, cell, *features)?)?)
            }
        })
    }

    /// Serializable form; k-ring models are materialized per cell.
    pub fn export(&self, c: &CityData, cells: &[Axial]) -> Result<Value> {
        Ok(match self {
            FittedModel::City(d) => json!({"model": "city", "distribution": LognormalExport::city(*d, 0)}),
            FittedModel::Kring {
                times,
                k,
                min_n,
                fallback,
            } => {
                let mut per_cell = Vec::new();
                for &cell in cells {
                    let fit = if times.is_empty() {
                        LognormalExport::city(*fallback, 0)
                    } else {
                        LognormalExport::kring(&kring_model(cell, times, *k, *min_n)?)
                    };
                    per_cell.push(json!({"cell_q": cell.q, "cell_r": cell.r, "distribution": fit}));
                }
                json!({"model": "kring", "k": k, "city_id": c.city_id, "cells": per_cell})
            }
            FittedModel::Lss { model, features } => json!({
                "model": "lss",
                "features": features,
                "checkpoint": ModelCheckpoint::from(model),
            }),
            FittedModel::Cps { model, features } => json!({
                "model": "cps",
                "features": features,
                "version": 1,
                "cps": model,
            }),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub folds: Vec<FoldScores>,
}

/// Cross-validate `kind` under `spec`, folding over the target city's hexes.
pub fn run_experiment(
    corpus: &[CityData],
    spec: &SchemeSpec,
    kind: ModelKind,
    features: Option<FeatureSource>,
    plan: &FoldPlan,
    opts: &ModelOptions,
) -> Result<ExperimentOutput> {
    let target = city(corpus, &spec.target_city)?;
    let sources: Vec<&CityData> = spec
        .source_cities
        .iter()
        .filter(|id| **id != spec.target_city)
        .map(|id| city(corpus, id))
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(plan.folds.len());
    for (f, fold) in plan.folds.iter().enumerate() {
        let ctx = |e: Error| e.context(format!("fold {f}"));
        if let Some(c) = fold.test_hexes.intersection(&fold.train_hexes).next() {
            return Err(Error::Leakage(format!("fold {f} lists hex {c} as both train and test")));
        }
        let mut train: Vec<&DeliveryRecord> = sources.iter().flat_map(|c| c.deliveries.iter()).collect();
        if spec.trains_on_target() {
            train.extend(target.deliveries.iter().filter(|d| fold.train_hexes.contains(&d.cell)));
        }
        if let Some(d) = train
            .iter()
            .find(|d| d.city_id == target.city_id && fold.test_hexes.contains(&d.cell))
        {
            return Err(Error::Leakage(format!("fold {f} trains on test hex {}", d.cell)));
        }
        let test: Vec<&DeliveryRecord> = target
            .deliveries
            .iter()
            .filter(|d| fold.test_hexes.contains(&d.cell))
            .collect();
        let model = fit_model(corpus, &target.city_id, &train, kind, features, &opts_for_fold(opts, f)).map_err(ctx)?;
        let mut by_cell: BTreeMap<Axial, AnyDistribution> = BTreeMap::new();
        let mut dists = Vec::with_capacity(test.len());
        for d in &test {
            let dist = match by_cell.entry(d.cell) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(model.predict_cell(target, d.cell).map_err(ctx)?)
                }
            };
            dists.push(dist.clone());
        }
        let ys: Vec<f64> = test.iter().map(|d| d.service_time_s).collect();
        scores.push(score_fold(f, &dists, &ys).map_err(ctx)?);
    }
    let scheme = serde_json::to_value(spec.scheme)?
        .as_str()
        .unwrap_or_default()
        .to_string();
    let report = EvalReport::from_folds(kind.name(), scheme, &spec.target_city, scores.clone())?;
    Ok(ExperimentOutput { report, folds: scores })
}

fn opts_for_fold(opts: &ModelOptions, fold: usize) -> ModelOptions {
    ModelOptions {
        seed: opts.seed.wrapping_add(fold as u64),
        ..*opts
    }
}

pub fn write_fold_csv<W: Write>(writer: W, folds: &[FoldScores]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for f in folds {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fold_csv<R: std::io::Read>(reader: R) -> Result<Vec<FoldScores>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellExceedance {
    pub cell: Axial,
    pub thresholds: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// P(T > t) per cell and threshold.
pub fn exceedance_map<D: PredictiveDistribution>(cells: &[(Axial, D)], thresholds: &[f64]) -> Vec<CellExceedance> {
    cells
        .iter()
        .map(|(cell, d)| CellExceedance {
            cell: *cell,
            thresholds: thresholds.to_vec(),
            probabilities: thresholds.iter().map(|&t| d.exceedance(t).clamp(0.0, 1.0)).collect(),
        })
        .collect()
}

/// Cells as GeoJSON polygons carrying `p_<threshold>` properties.
pub fn exceedance_geojson(tess: &Tessellation, rows: &[CellExceedance]) -> Value {
    let features: Vec<Value> = rows
        .iter()
        .map(|row| {
            let mut ring: Vec<Value> = tess
                .cell_polygon(row.cell)
                .iter()
                .map(|p| json!([p.lon, p.lat]))
                .collect();
            ring.push(ring[0].clone());
            let mut props = serde_json::Map::new();
            props.insert("city_id".into(), json!(tess.city_id));
            props.insert("cell_q".into(), json!(row.cell.q));
            props.insert("cell_r".into(), json!(row.cell.r));
            for (t, p) in row.thresholds.iter().zip(&row.probabilities) {
                props.insert(format!("p_{}", t.round() as i64), json!(p));
            }
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": props,
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Experiment description read from JSON. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub target_city: String,
    pub model: ModelKind,
    #[serde(default)]
    pub features: Option<FeatureSource>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub seed: u64,
    /// City directories as written by `ingest` or `synth`.
    pub cities: Vec<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub boost: Option<BoostParams>,
}

fn default_k() -> usize {
    5
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut cfg.cities {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        if let Some(o) = cfg.out.as_mut().filter(|o| o.is_relative()) {
            *o = base.join(&*o);
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::ingest::Vehicle;

    fn rec(city: &str, q: i32, t: f64) -> DeliveryRecord {
        DeliveryRecord {
            city_id: city.into(),
            point: GeoPoint { lat: 0.0, lon: 0.0 },
            cell: Axial::new(q, 0),
            service_time_s: t,
            vehicle: Vehicle::Van,
            route_id: None,
        }
    }

    #[test]
    fn folds_partition_hexes() {
        let ds: Vec<DeliveryRecord> = (0..23)
            .flat_map(|q| (0..3).map(move |i| rec("a", q, 10.0 + i as f64)))
            .collect();
        let plan = hex_kfold(&ds, 5, 9).unwrap();
        let mut all = BTreeSet::new();
        for f in &plan.folds {
            assert!(f.test_hexes.is_disjoint(&f.train_hexes));
            assert_eq!(f.test_hexes.len() + f.train_hexes.len(), 23);
            assert!(f.test_hexes.len() == 4 || f.test_hexes.len() == 5);
            for h in &f.test_hexes {
                assert!(all.insert(*h), "hex in two test sets");
            }
        }
        assert_eq!(all.len(), 23);
        assert_eq!(plan, hex_kfold(&ds, 5, 9).unwrap());
        assert_ne!(plan, hex_kfold(&ds, 5, 10).unwrap());
        let loo = hex_kfold(&ds, 23, 1).unwrap();
        assert!(loo.folds.iter().all(|f| f.test_hexes.len() == 1));
        assert!(matches!(
            hex_kfold(&ds, 24, 1),
            Err(Error::TooFewHexes { needed: 24, got: 23 })
        ));
    }

    #[test]
    fn scheme_resolution() {
        let cities = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let t = SchemeSpec::resolve(Scheme::Transfer, "b", &cities).unwrap();
        assert_eq!(t.source_cities, vec!["a", "c"]);
        let f = SchemeSpec::resolve(Scheme::Full, "b", &cities).unwrap();
        assert!(f.source_cities.contains(&"b".to_string()));
        let c = SchemeSpec::resolve(Scheme::CitySpecific, "b", &cities).unwrap();
        assert_eq!(c.source_cities, vec!["b"]);
        let err = SchemeSpec::resolve(Scheme::Transfer, "a", &cities[..1]).unwrap_err();
        assert!(err.is_validation());
        assert!(SchemeSpec::resolve(Scheme::CitySpecific, "z", &cities).is_err());
    }

    #[test]
    fn exceedance_examples() {
        let point = CpsDistribution::from_residuals(200.0, &[0.0]);
        let rows = exceedance_map(&[(Axial::new(0, 0), point)], &DEFAULT_THRESHOLDS);
        assert_eq!(rows[0].probabilities, vec![1.0, 0.0, 0.0]);
        let ln = FittedLognormal::new(223f64.ln(), 0.7).unwrap();
        let rows = exceedance_map(&[(Axial::new(1, 0), ln)], &[150.0, 223.0, 300.0, 600.0]);
        assert!((rows[0].probabilities[1] - 0.5).abs() < 1e-12);
        assert!(rows[0].probabilities.windows(2).all(|w| w[0] >= w[1]));
        let tess = Tessellation::with_default_edge("x", GeoPoint { lat: 40.0, lon: -74.0 }).unwrap();
        let gj = exceedance_geojson(&tess, &rows);
        let f = &gj["features"][0];
        assert_eq!(f["geometry"]["coordinates"][0].as_array().unwrap().len(), 7);
        assert!(f["properties"]["p_300"].is_number());
    }

    #[test]
    fn fold_csv_round_trip_and_aggregation() {
        let folds: Vec<FoldScores> = (0..3)
            .map(|i| FoldScores {
                fold: i,
                n_test: 10 + i,
                crps: 50.0 + i as f64,
                coverage: 0.9,
                width: 300.0,
                pinball_p50: 20.0,
                pinball_p95: 7.5,
            })
            .collect();
        let mut buf = Vec::new();
        write_fold_csv(&mut buf, &folds).unwrap();
        let back = read_fold_csv(buf.as_slice()).unwrap();
        assert_eq!(back, folds);
        let r = EvalReport::from_folds("m", "s", "c", back).unwrap();
        assert_eq!(r.crps_mean, 51.0);
        assert!((r.crps.std - 1.0).abs() < 1e-12);
    }
}
