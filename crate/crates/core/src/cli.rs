//! Command-line front end. Every command reads files and flags and writes
//! files; diagnostics go to standard error.
//!
//! Settings come from flags and an optional `--config` JSON object whose
//! keys are the long flag names in snake_case. Flags win over the file.
//! Relative paths in the file resolve against the file's directory.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::CellTimes;
use crate::boosting::{write_predictions_csv, BoostParams};
use crate::cluster::{
    adjusted_rand_index, cluster_embeddings, cluster_summary, order_by_service_time, summary_json,
    write_assignment_csv, Linkage, OrderingStat, DEFAULT_K,
};
use crate::dist::PredictiveDistribution;
use crate::embed::{embed_matrix, fit_embeddings, EmbedConfig, EmbeddingMatrix, EncoderParams, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    exceedance_geojson, exceedance_map, fit_model, hex_kfold, run_experiment, write_fold_csv, CityData,
    ExperimentConfig, FeatureSource, FittedModel, ModelKind, ModelOptions, Scheme, SchemeSpec, DEFAULT_THRESHOLDS,
    DELIVERIES_FILE, EMBEDDINGS_FILE, FEATURES_FILE, TESSELLATION_FILE,
};
use crate::geo::{Axial, GeoPoint, Tessellation, DEFAULT_EDGE_M};
use crate::ingest::{
    build_feature_matrix, load_deliveries_csv, load_tagged_geojson, read_json, synth_city, write_deliveries_csv,
    write_json, SynthConfig, TagVocabulary,
};
use crate::metrics::EvalReport;

pub const ENCODER_FILE: &str = "encoder.json";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Parser)]
#[command(
    name = "urbanctx",
    version,
    about = "Hexagonal context features and service-time distributions"
)]
pub struct Cli {
    /// JSON file with default values for the command's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count tagged OSM features per hexagon and clean a delivery CSV.
    Ingest(IngestArgs),
    /// Train the hexagon autoencoder and export per-cell embeddings.
    Embed(EmbedArgs),
    /// Agglomerative clustering of embeddings.
    Cluster(ClusterArgs),
    /// Fit one model kind and export it with per-cell predictions.
    Fit(FitArgs),
    /// Cross-validate a model under a training scheme.
    Eval(EvalArgs),
    /// Exceedance-probability map as GeoJSON.
    Map(MapArgs),
    /// Generate a synthetic city.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cells: Option<usize>,
    #[arg(long)]
    pub deliveries: Option<usize>,
    #[arg(long)]
    pub context_effect: Option<f64>,
    #[arg(long)]
    pub city_id: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub lat: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct IngestArgs {
    /// GeoJSON FeatureCollection of tagged features.
    #[arg(long)]
    pub osm: Option<PathBuf>,
    /// Delivery CSV (city_id,lat,lon,service_time_s,vehicle[,route_id]).
    #[arg(long)]
    pub deliveries: Option<PathBuf>,
    #[arg(long)]
    pub city_id: Option<String>,
    /// Tessellation origin.
    #[arg(long, allow_negative_numbers = true)]
    pub lat: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lon: Option<f64>,
    #[arg(long)]
    pub edge_m: Option<f64>,
    /// `754`, `681`, or a path to a one-tag-per-line vocabulary.
    #[arg(long)]
    pub vocab: Option<String>,
    /// Keep cells whose features carry no vocabulary tag.
    #[arg(long)]
    pub keep_empty: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EmbedArgs {
    /// City directory holding features.json.
    #[arg(long)]
    pub city: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub radius: Option<u32>,
    /// Reuse a trained encoder instead of training.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Output directory (defaults to the city directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClusterArgs {
    #[arg(long)]
    pub city: Option<PathBuf>,
    /// Embedding CSV (defaults to the city's embeddings.csv).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub linkage: Option<Linkage>,
    #[arg(long, value_enum)]
    pub stat: Option<OrderingStat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    /// City directories; repeat for several cities.
    #[arg(long = "city")]
    #[serde(default)]
    pub cities: Vec<PathBuf>,
    #[arg(long)]
    pub target_city: Option<String>,
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub features: Option<FeatureSource>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_trees: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long = "city")]
    #[serde(default)]
    pub cities: Vec<PathBuf>,
    #[arg(long)]
    pub target_city: Option<String>,
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub features: Option<FeatureSource>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(skip)]
    pub boost: Option<BoostParams>,
}

#[derive(Debug, Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MapArgs {
    #[arg(long = "city")]
    #[serde(default)]
    pub cities: Vec<PathBuf>,
    #[arg(long)]
    pub target_city: Option<String>,
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub features: Option<FeatureSource>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Thresholds in seconds, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const PATH_KEYS: [&str; 7] = ["out", "city", "cities", "osm", "deliveries", "embeddings", "encoder"];

/// Overlay explicitly given flags on a config object.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let mut base: Value = read_json(path)?;
    let Value::Object(obj) = &mut base else {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    for key in PATH_KEYS {
        if let Some(v) = obj.get_mut(key) {
            resolve_paths(v, dir);
        }
    }
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            let unset = match &v {
                Value::Null | Value::Bool(false) => true,
                Value::Array(a) => a.is_empty(),
                _ => false,
            };
            if !unset {
                obj.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve_paths(v: &mut Value, dir: &Path) {
    match v {
        Value::String(s) if Path::new(s.as_str()).is_relative() => {
            *s = dir.join(s.as_str()).to_string_lossy().into_owned();
        }
        Value::Array(items) => items.iter_mut().for_each(|i| resolve_paths(i, dir)),
        _ => {}
    }
}

fn need<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("missing required setting --{flag}")))
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = need(out, "out")?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io(e).context(format!("creating {}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(e).context(format!("creating {}", path.display())))
}

fn origin(lat: Option<f64>, lon: Option<f64>) -> Result<GeoPoint> {
    GeoPoint::new(need(lat, "lat")?, need(lon, "lon")?)
}

/// Parse `argv` and run; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => synth(merge(&a, cfg)?),
        Command::Ingest(a) => ingest(merge(&a, cfg)?),
        Command::Embed(a) => embed(merge(&a, cfg)?),
        Command::Cluster(a) => cluster(merge(&a, cfg)?),
        Command::Fit(a) => fit(merge(&a, cfg)?),
        Command::Eval(a) => eval(merge(&a, cfg)?),
        Command::Map(a) => map(merge(&a, cfg)?),
    }
}

fn write_city(dir: &Path, tess: &Tessellation, c: &CityData) -> Result<()> {
    write_json(&dir.join(TESSELLATION_FILE), tess)?;
    if let Some(f) = &c.features {
        f.write_json(&dir.join(FEATURES_FILE))?;
    }
    write_deliveries_csv(create(&dir.join(DELIVERIES_FILE))?, &c.deliveries)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = need(a.seed, "seed")?;
    let mut cfg = SynthConfig::new(
        seed,
        a.cells.unwrap_or(400),
        a.deliveries.unwrap_or(20_000),
        a.context_effect.unwrap_or(1.0),
    );
    if let Some(id) = a.city_id {
        cfg.city_id = id;
    }
    if a.lat.is_some() || a.lon.is_some() {
        cfg.origin = origin(a.lat, a.lon)?;
    }
    let dir = out_dir(a.out)?;
    let city = synth_city(&cfg)?;
    let data = CityData {
        city_id: cfg.city_id.clone(),
        tess: city.tess.clone(),
        features: Some(city.features.clone()),
        embeddings: None,
        deliveries: city.deliveries.clone(),
    };
    write_city(&dir, &city.tess, &data)?;
    write_json(&dir.join(TRUTH_FILE), &city.truth)?;
    write_json(&dir.join("osm.geojson"), &city.tagged_geojson(seed))?;
    eprintln!(
        "synth: {} cells, {} deliveries -> {}",
        city.features.cells().len(),
        city.deliveries.len(),
        dir.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let city_id = need(a.city_id, "city-id")?;
    let tess = Tessellation::new(&city_id, origin(a.lat, a.lon)?, a.edge_m.unwrap_or(DEFAULT_EDGE_M))?;
    let vocab = match a.vocab.as_deref().unwrap_or("754") {
        "754" => TagVocabulary::default_754(),
        "681" => TagVocabulary::default_681(),
        path => TagVocabulary::from_file(Path::new(path))?,
    };
    let osm = load_tagged_geojson(&need(a.osm, "osm")?)?;
    let loaded = load_deliveries_csv(&need(a.deliveries, "deliveries")?, &tess)?;
    let (matrix, drops) = build_feature_matrix(&osm, &tess, std::sync::Arc::new(vocab), a.keep_empty)?;
    let matrix = with_delivery_cells(matrix, &loaded.records)?;
    let dir = out_dir(a.out)?;
    let data = CityData {
        city_id,
        tess: tess.clone(),
        features: Some(matrix),
        embeddings: None,
        deliveries: loaded.records,
    };
    write_city(&dir, &tess, &data)?;
    write_json(
        &dir.join("ingest_report.json"),
        &json!({
            "features_read": osm.len(),
            "cells": data.features.as_ref().map_or(0, |m| m.cells().len()),
            "deliveries": data.deliveries.len(),
            "rejected_rows": loaded.rejected,
            "dropped_tags": drops,
        }),
    )?;
    eprintln!(
        "ingest: {} deliveries kept, {} rejected",
        data.deliveries.len(),
        loaded.rejected.len()
    );
    Ok(())
}

/// Adds zero rows for delivery cells without tagged features, so every model
/// has a feature row for every cell it is asked about.
fn with_delivery_cells(
    m: crate::ingest::RegionFeatureMatrix,
    deliveries: &[crate::ingest::DeliveryRecord],
) -> Result<crate::ingest::RegionFeatureMatrix> {
    let mut rows: std::collections::BTreeMap<Axial, Vec<u32>> = m
        .cells()
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, m.row(i).to_vec()))
        .collect();
    for d in deliveries {
        rows.entry(d.cell).or_insert_with(|| vec![0; m.width()]);
    }
    let cells = rows.keys().copied().collect();
    crate::ingest::RegionFeatureMatrix::new(
        &m.city_id,
        m.vocab.clone(),
        cells,
        rows.into_values().flatten().collect(),
    )
}

fn embed(a: EmbedArgs) -> Result<()> {
    let city_dir = need(a.city, "city")?;
    let seed = need(a.seed, "seed")?;
    let m = crate::ingest::RegionFeatureMatrix::read_json(&city_dir.join(FEATURES_FILE))?;
    let dir = out_dir(a.out.or(Some(city_dir)))?;
    let emb = match a.encoder {
        Some(path) => {
            let params = EncoderParams::load(&path)?;
            embed_matrix(&params, &m, true)?
        }
        None => {
            let cfg = EmbedConfig {
                radius: a.radius.unwrap_or(crate::embed::DEFAULT_RADIUS),
                ..EmbedConfig::new(m.width())
            };
            let (outcome, emb) = fit_embeddings(&m, cfg, &TrainConfig::new(a.epochs.unwrap_or(30), seed))?;
            outcome.params.save(&dir.join(ENCODER_FILE))?;
            write_json(&dir.join("loss_curve.json"), &outcome.loss_curve)?;
            eprintln!(
                "embed: loss {:.3} -> {:.3}",
                outcome.loss_curve[0],
                outcome.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
            emb
        }
    };
    emb.write_csv(create(&dir.join(EMBEDDINGS_FILE))?)?;
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let city_dir = need(a.city, "city")?;
    let city = CityData::load_dir(&city_dir)?;
    let emb = match a.embeddings {
        Some(p) => EmbeddingMatrix::read_csv(File::open(&p)?, &city.city_id)?,
        None => city.embeddings.clone().ok_or_else(|| {
            Error::Config(format!(
                "no {EMBEDDINGS_FILE} in {}; run embed first",
                city_dir.display()
            ))
        })?,
    };
    let raw = cluster_embeddings(&emb, a.k.unwrap_or(DEFAULT_K), a.linkage.unwrap_or_default())?;
    let times = CellTimes::new(city.deliveries.iter().map(|d| (d.cell, d.service_time_s)));
    let ordered = order_by_service_time(&raw, &times, a.stat.unwrap_or_default())?;
    let dir = out_dir(a.out)?;
    write_assignment_csv(create(&dir.join("clusters.csv"))?, &ordered)?;
    let mut summary = match &city.features {
        Some(m) => summary_json(&cluster_summary(&ordered, m)?),
        None => json!({}),
    };
    let truth_path = city_dir.join(TRUTH_FILE);
    if truth_path.exists() {
        let truth: crate::ingest::SynthGroundTruth = read_json(&truth_path)?;
        let planted: std::collections::HashMap<Axial, usize> = truth
            .cells
            .iter()
            .zip(&truth.archetype)
            .map(|([q, r], a)| (Axial::new(*q, *r), *a))
            .collect();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (c, l) in ordered.cells.iter().zip(&ordered.labels) {
            if let Some(t) = planted.get(c) {
                x.push(*l);
                y.push(*t);
            }
        }
        let ari = adjusted_rand_index(&x, &y)?;
        eprintln!("cluster: ARI vs planted archetypes {ari:.3}");
        summary = json!({"clusters": summary, "ari_vs_truth": ari});
    }
    write_json(&dir.join("cluster_summary.json"), &summary)?;
    Ok(())
}

fn load_corpus(paths: &[PathBuf]) -> Result<Vec<CityData>> {
    if paths.is_empty() {
        return Err(Error::Config("missing required setting --city".into()));
    }
    let corpus: Vec<CityData> = paths.iter().map(|p| CityData::load_dir(p)).collect::<Result<_>>()?;
    let mut ids: Vec<&str> = corpus.iter().map(|c| c.city_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("two city directories share a city_id".into()));
    }
    Ok(corpus)
}

fn resolve_spec(corpus: &[CityData], scheme: Option<Scheme>, target: Option<String>) -> Result<SchemeSpec> {
    let ids: Vec<String> = corpus.iter().map(|c| c.city_id.clone()).collect();
    let target = target.unwrap_or_else(|| ids[0].clone());
    SchemeSpec::resolve(scheme.unwrap_or(Scheme::CitySpecific), &target, &ids)
}

/// Fits on every delivery the scheme allows, returning the model and target.
fn fit_full(
    corpus: &[CityData],
    spec: &SchemeSpec,
    kind: ModelKind,
    features: Option<FeatureSource>,
    opts: &ModelOptions,
) -> Result<(FittedModel, usize)> {
    let train: Vec<_> = corpus
        .iter()
        .filter(|c| spec.source_cities.contains(&c.city_id))
        .flat_map(|c| c.deliveries.iter())
        .collect();
    let model = fit_model(corpus, &spec.target_city, &train, kind, features, opts)?;
    let t = corpus
        .iter()
        .position(|c| c.city_id == spec.target_city)
        .expect("resolved target is in corpus");
    Ok((model, t))
}

/// Cells to predict for: feature rows if any, else embedding rows, else
/// cells with deliveries.
fn target_cells(c: &CityData) -> Vec<Axial> {
    if let Some(m) = &c.features {
        return m.cells().to_vec();
    }
    if let Some(e) = &c.embeddings {
        return e.cells.clone();
    }
    let set: std::collections::BTreeSet<Axial> = c.deliveries.iter().map(|d| d.cell).collect();
    set.into_iter().collect()
}

fn fit(a: FitArgs) -> Result<()> {
    let seed = need(a.seed, "seed")?;
    let kind = need(a.model, "model")?;
    let corpus = load_corpus(&a.cities)?;
    let spec = resolve_spec(&corpus, a.scheme, a.target_city)?;
    let mut opts = ModelOptions::new(seed);
    if let Some(n) = a.n_trees {
        opts.boost.n_trees = n;
    }
    let (model, t) = fit_full(&corpus, &spec, kind, a.features, &opts)?;
    let target = &corpus[t];
    let cells = target_cells(target);
    let dir = out_dir(a.out)?;
    write_json(&dir.join("model.json"), &model.export(target, &cells)?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("cell_predictions.csv"))?);
    w.write_record(["cell_q", "cell_r", "q05", "median", "q95"])?;
    let mut lognormals = Vec::new();
    for &cell in &cells {
        let d = model.predict_cell(target, cell)?;
        if let crate::eval::AnyDistribution::Lognormal(l) = &d {
            lognormals.push(*l);
        }
        w.write_record([
            cell.q.to_string(),
            cell.r.to_string(),
            d.quantile(0.05).to_string(),
            d.median().to_string(),
            d.quantile(0.95).to_string(),
        ])?;
    }
    w.flush()?;
    if matches!(model, FittedModel::Lss { .. }) {
        write_predictions_csv(create(&dir.join("predictions.csv"))?, &lognormals)?;
    }
    eprintln!("fit: {} on {} cells of {}", kind.name(), cells.len(), spec.target_city);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig {
        scheme: a.scheme.unwrap_or(Scheme::CitySpecific),
        target_city: a.target_city.unwrap_or_default(),
        model: need(a.model, "model")?,
        features: a.features,
        k: a.k.unwrap_or(5),
        seed: need(a.seed, "seed")?,
        cities: a.cities,
        out: a.out,
        boost: a.boost,
    };
    let corpus = load_corpus(&cfg.cities)?;
    let target = (!cfg.target_city.is_empty()).then(|| cfg.target_city.clone());
    let spec = resolve_spec(&corpus, Some(cfg.scheme), target)?;
    let t = corpus
        .iter()
        .position(|c| c.city_id == spec.target_city)
        .expect("resolved");
    let plan = hex_kfold(&corpus[t].deliveries, cfg.k, cfg.seed)?;
    let mut opts = ModelOptions::new(cfg.seed);
    if let Some(b) = cfg.boost {
        opts.boost = b;
    }
    let out = run_experiment(&corpus, &spec, cfg.model, cfg.features, &plan, &opts)?;
    let dir = out_dir(cfg.out.clone())?;
    write_json(&dir.join("report.json"), &out.report)?;
    write_fold_csv(create(&dir.join("folds.csv"))?, &out.folds)?;
    write_json(&dir.join("fold_plan.json"), &plan)?;
    std::fs::write(
        dir.join("report.tsv"),
        format!("{}\n{}\n", EvalReport::TABLE_HEADER, out.report.table_row()),
    )?;
    eprintln!("{}\n{}", EvalReport::TABLE_HEADER, out.report.table_row());
    Ok(())
}

fn map(a: MapArgs) -> Result<()> {
    let seed = need(a.seed, "seed")?;
    let kind = need(a.model, "model")?;
    let corpus = load_corpus(&a.cities)?;
    let spec = resolve_spec(&corpus, a.scheme, a.target_city)?;
    let (model, t) = fit_full(&corpus, &spec, kind, a.features, &ModelOptions::new(seed))?;
    let target = &corpus[t];
    let thresholds = if a.thresholds.is_empty() {
        DEFAULT_THRESHOLDS.to_vec()
    } else {
        a.thresholds
    };
    if thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Config("thresholds must be positive seconds".into()));
    }
    let cells: Vec<(Axial, _)> = target_cells(target)
        .into_iter()
        .map(|c| Ok((c, model.predict_cell(target, c)?)))
        .collect::<Result<_>>()?;
    let rows = exceedance_map(&cells, &thresholds);
    let dir = out_dir(a.out)?;
    write_json(
        &dir.join("exceedance.geojson"),
        &exceedance_geojson(&target.tess, &rows),
    )?;
    eprintln!("map: {} cells", rows.len());
    Ok(())
}
