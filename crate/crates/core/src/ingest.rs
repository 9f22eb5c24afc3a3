//! Tagged geometries and delivery records in, per-hexagon tag counts out.
//! Also hosts the synthetic city generator used as a known-answer corpus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geo::{Axial, GeoPoint, PlanarXY, Tessellation};

pub const SUPER_TAGS: [&str; 9] = [
    "Built Environment",
    "Transportation",
    "Natural Elements",
    "Amenities",
    "Leisure & Recreation",
    "Barriers & Boundaries",
    "Utilities & Services",
    "Commerce & Industry",
    "Historical & Cultural",
];

pub const VOCAB_754: &str = include_str!("../data/vocab_754.txt");
pub const VOCAB_681: &str = include_str!("../data/vocab_681.txt");
pub const DEFAULT_SUPER_MAP: &str = include_str!("../data/supertags.tsv");

pub const MAX_SERVICE_TIME_S: f64 = 86_400.0;

/// Ordered sub-tag list plus the regex rollup onto the nine super-tags.
#[derive(Debug, Clone)]
pub struct TagVocabulary {
    subtags: Vec<String>,
    index: HashMap<String, usize>,
    rules: Vec<(Regex, usize)>,
    /// Super-tag column of each sub-tag, `None` when no rule matches.
    super_of: Vec<Option<usize>>,
}

impl TagVocabulary {
    pub fn new(subtags: Vec<String>, super_map: &str) -> Result<Self> {
        let rules = parse_super_map(super_map)?;
        let mut index = HashMap::with_capacity(subtags.len());
        for (i, t) in subtags.iter().enumerate() {
            if !t.contains('=') {
                return Err(Error::Config(format!("sub-tag {t:?} is not key=value")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate sub-tag {t:?}")));
            }
        }
        let super_of = subtags
            .iter()
            .map(|t| rules.iter().find(|(re, _)| re.is_match(t)).map(|(_, s)| *s))
            .collect();
        Ok(Self {
            subtags,
            index,
            rules,
            super_of,
        })
    }

    /// Parses a vocabulary text file body: one `key=value` per line, `#` comments.
    pub fn parse(text: &str, super_map: &str) -> Result<Self> {
        let subtags = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Self::new(subtags, super_map)
    }

    pub fn default_754() -> Self {
        Self::parse(VOCAB_754, DEFAULT_SUPER_MAP).expect("bundled vocabulary is valid")
    }

    pub fn default_681() -> Self {
        Self::parse(VOCAB_681, DEFAULT_SUPER_MAP).expect("bundled vocabulary is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(e).context(format!("reading vocabulary {}", path.display())))?;
        Self::parse(&text, DEFAULT_SUPER_MAP)
    }

    pub fn len(&self) -> usize {
        self.subtags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtags.is_empty()
    }

    pub fn subtags(&self) -> &[String] {
        &self.subtags
    }

    pub fn position(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn super_tag_of(&self, column: usize) -> Option<usize> {
        self.super_of[column]
    }

    /// Super-tag of an arbitrary `key=value`, vocabulary or not.
    pub fn classify(&self, tag: &str) -> Option<&'static str> {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(tag))
            .map(|(_, s)| SUPER_TAGS[*s])
    }
}

fn parse_super_map(text: &str) -> Result<Vec<(Regex, usize)>> {
    let mut rules = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, pattern) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("super-tag map line {}: missing tab", lineno + 1)))?;
        let idx = SUPER_TAGS
            .iter()
            .position(|s| *s == name.trim())
            .ok_or_else(|| Error::Config(format!("unknown super-tag {name:?}")))?;
        let re =
            Regex::new(pattern.trim()).map_err(|e| Error::Config(format!("super-tag map line {}: {e}", lineno + 1)))?;
        rules.push((re, idx));
    }
    Ok(rules)
}

/// A geometry reduced to a representative point, with its flat tag map.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedFeature {
    pub point: GeoPoint,
    pub tags: BTreeMap<String, String>,
}

pub fn load_tagged_geojson(path: &Path) -> Result<Vec<TaggedFeature>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(e).context(format!("reading {}", path.display())))?;
    parse_tagged_geojson(&text)
}

pub fn parse_tagged_geojson(text: &str) -> Result<Vec<TaggedFeature>> {
    let root: Value = serde_json::from_str(text).map_err(|e| json_parse_error(text, &e))?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::Schema("top level is not a GeoJSON FeatureCollection".into()));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Schema("FeatureCollection has no features array".into()))?;
    if features.is_empty() {
        return Err(Error::EmptyCollection);
    }
    features
        .iter()
        .enumerate()
        .map(|(index, f)| parse_feature(f).map_err(|message| Error::Feature { index, message }))
        .collect()
}

fn json_parse_error(text: &str, e: &serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    let offset = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + column.saturating_sub(1);
    Error::Parse {
        offset,
        line,
        column,
        message: e.to_string(),
    }
}

fn parse_feature(f: &Value) -> std::result::Result<TaggedFeature, String> {
    let geometry = f.get("geometry").ok_or("missing geometry")?;
    let point = representative_point(geometry)?;
    let mut tags = BTreeMap::new();
    if let Some(props) = f.get("properties") {
        match props {
            Value::Null => {}
            Value::Object(map) => {
                for (k, v) in map {
                    let v = match v {
                        Value::String(s) => s.clone(),
                        Value::Number(n) => n.to_string(),
                        Value::Bool(b) => b.to_string(),
                        Value::Null => continue,
                        _ => return Err(format!("property {k:?} is not a flat string value")),
                    };
                    tags.insert(k.clone(), v);
                }
            }
            _ => return Err("properties is not an object".into()),
        }
    }
    Ok(TaggedFeature { point, tags })
}

fn position(v: &Value) -> std::result::Result<(f64, f64), String> {
    let arr = v.as_array().ok_or("position is not an array")?;
    match (arr.first().and_then(Value::as_f64), arr.get(1).and_then(Value::as_f64)) {
        (Some(lon), Some(lat)) => Ok((lon, lat)),
        _ => Err("position needs numeric lon, lat".into()),
    }
}

fn positions(v: &Value) -> std::result::Result<Vec<(f64, f64)>, String> {
    v.as_array()
        .ok_or("coordinates are not an array")?
        .iter()
        .map(position)
        .collect()
}

fn ring_centroid(ring: &[(f64, f64)]) -> std::result::Result<(f64, f64), String> {
    if ring.is_empty() {
        return Err("empty polygon ring".into());
    }
    let n = ring.len();
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x0, y0) = ring[i];
        let (x1, y1) = ring[(i + 1) % n];
        let cross = x0 * y1 - x1 * y0;
        a2 += cross;
        cx += (x0 + x1) * cross;
        cy += (y0 + y1) * cross;
    }
    if a2.abs() < 1e-18 {
        let m = n as f64;
        return Ok((
            ring.iter().map(|p| p.0).sum::<f64>() / m,
            ring.iter().map(|p| p.1).sum::<f64>() / m,
        ));
    }
    Ok((cx / (3.0 * a2), cy / (3.0 * a2)))
}

fn representative_point(geometry: &Value) -> std::result::Result<GeoPoint, String> {
    let kind = geometry
        .get("type")
        .and_then(Value::as_str)
        .ok_or("geometry without type")?;
    let coords = geometry.get("coordinates").ok_or("geometry without coordinates")?;
    let first = |v: &Value| -> std::result::Result<Value, String> {
        v.as_array()
            .and_then(|a| a.first())
            .cloned()
            .ok_or_else(|| format!("empty {kind}"))
    };
    let (lon, lat) = match kind {
        "Point" => position(coords)?,
        "MultiPoint" | "LineString" => position(&first(coords)?)?,
        "MultiLineString" => position(&first(&first(coords)?)?)?,
        "Polygon" => ring_centroid(&positions(&first(coords)?)?)?,
        "MultiPolygon" => ring_centroid(&positions(&first(&first(coords)?)?)?)?,
        other => return Err(format!("unsupported geometry type {other}")),
    };
    GeoPoint::new(lat, lon).map_err(|e| e.to_string())
}

/// Per-hexagon counts over a tag vocabulary, one row per cell.
#[derive(Debug, Clone)]
pub struct RegionFeatureMatrix {
    pub city_id: String,
    pub vocab: Arc<TagVocabulary>,
    cells: Vec<Axial>,
    counts: Vec<u32>,
    row_of: HashMap<Axial, usize>,
}

impl RegionFeatureMatrix {
    pub fn new(
        city_id: impl Into<String>,
        vocab: Arc<TagVocabulary>,
        cells: Vec<Axial>,
        counts: Vec<u32>,
    ) -> Result<Self> {
        if counts.len() != cells.len() * vocab.len() {
            return Err(Error::Shape {
                expected: cells.len() * vocab.len(),
                actual: counts.len(),
            });
        }
        let mut row_of = HashMap::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            if row_of.insert(*c, i).is_some() {
                return Err(Error::Config(format!("duplicate cell {c} in feature matrix")));
            }
        }
        Ok(Self {
            city_id: city_id.into(),
            vocab,
            cells,
            counts,
            row_of,
        })
    }

    pub fn cells(&self) -> &[Axial] {
        &self.cells
    }

    pub fn width(&self) -> usize {
        self.vocab.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let w = self.width();
        &self.counts[i * w..(i + 1) * w]
    }

    pub fn row_of(&self, cell: Axial) -> Option<&[u32]> {
        self.row_of.get(&cell).map(|&i| self.row(i))
    }

    pub fn index_of(&self, cell: Axial) -> Option<usize> {
        self.row_of.get(&cell).copied()
    }

    pub fn count(&self, cell: Axial, tag: &str) -> u32 {
        match (self.row_of(cell), self.vocab.position(tag)) {
            (Some(row), Some(j)) => row[j],
            _ => 0,
        }
    }

    pub fn to_file(&self) -> FeatureMatrixFile {
        FeatureMatrixFile {
            city_id: self.city_id.clone(),
            subtags: self.vocab.subtags().to_vec(),
            cells: self.cells.iter().map(|c| [c.q, c.r]).collect(),
            counts: (0..self.cells.len()).map(|i| self.row(i).to_vec()).collect(),
        }
    }

    pub fn from_file(file: FeatureMatrixFile) -> Result<Self> {
        let vocab = Arc::new(TagVocabulary::new(file.subtags, DEFAULT_SUPER_MAP)?);
        if file.counts.len() != file.cells.len() {
            return Err(Error::Shape {
                expected: file.cells.len(),
                actual: file.counts.len(),
            });
        }
        let mut counts = Vec::with_capacity(file.cells.len() * vocab.len());
        for row in &file.counts {
            if row.len() != vocab.len() {
                return Err(Error::Shape {
                    expected: vocab.len(),
                    actual: row.len(),
                });
            }
            counts.extend_from_slice(row);
        }
        let cells = file.cells.iter().map(|[q, r]| Axial::new(*q, *r)).collect();
        Self::new(file.city_id, vocab, cells, counts)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_file(read_json(path)?)
    }
}

/// On-disk layout of a feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrixFile {
    pub city_id: String,
    pub subtags: Vec<String>,
    pub cells: Vec<[i32; 2]>,
    pub counts: Vec<Vec<u32>>,
}

/// Tags that were not counted, keyed by `key=value`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    pub dropped: BTreeMap<String, usize>,
    pub out_of_range: usize,
}

/// Counts each record's vocabulary tags in the hexagon holding its point.
/// Cells without any counted tag are left out unless `keep_empty` is set.
pub fn build_feature_matrix(
    records: &[TaggedFeature],
    tess: &Tessellation,
    vocab: Arc<TagVocabulary>,
    keep_empty: bool,
) -> Result<(RegionFeatureMatrix, DropReport)> {
    if vocab.is_empty() {
        return Err(Error::Config("empty tag vocabulary".into()));
    }
    let w = vocab.len();
    let mut rows: BTreeMap<Axial, Vec<u32>> = BTreeMap::new();
    let mut report = DropReport::default();
    for rec in records {
        let cell = match tess.point_to_axial(rec.point) {
            Ok(c) => c,
            Err(Error::OutOfRange { .. }) => {
                report.out_of_range += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut hits = Vec::new();
        for (k, v) in &rec.tags {
            let tag = format!("{k}={v}");
            match vocab.position(&tag) {
                Some(j) => hits.push(j),
                None => *report.dropped.entry(tag).or_default() += 1,
            }
        }
        if hits.is_empty() && !keep_empty {
            continue;
        }
        let row = rows.entry(cell).or_insert_with(|| vec![0; w]);
        for j in hits {
            row[j] += 1;
        }
    }
    let cells: Vec<Axial> = rows.keys().copied().collect();
    let counts = rows.into_values().flatten().collect();
    Ok((RegionFeatureMatrix::new(&tess.city_id, vocab, cells, counts)?, report))
}

/// Sums sub-tag columns into the nine super-tag columns.
pub fn super_tag_rollup(m: &RegionFeatureMatrix) -> Vec<[u64; 9]> {
    (0..m.cells().len())
        .map(|i| {
            let mut out = [0u64; 9];
            for (j, &c) in m.row(i).iter().enumerate() {
                if let Some(s) = m.vocab.super_tag_of(j) {
                    out[s] += c as u64;
                }
            }
            out
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vehicle {
    Van,
    CargoBike,
}

impl Vehicle {
    pub fn as_str(self) -> &'static str {
        match self {
            Vehicle::Van => "van",
            Vehicle::CargoBike => "cargo_bike",
        }
    }
}

impl std::str::FromStr for Vehicle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "van" => Ok(Vehicle::Van),
            "cargo_bike" => Ok(Vehicle::CargoBike),
            other => Err(format!("unknown vehicle {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub city_id: String,
    pub point: GeoPoint,
    pub cell: Axial,
    pub service_time_s: f64,
    pub vehicle: Vehicle,
    pub route_id: Option<String>,
}

/// A rejected CSV row (1-based data row index, header excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDeliveries {
    pub records: Vec<DeliveryRecord>,
    pub rejected: Vec<RowError>,
}

const DELIVERY_HEADER: [&str; 5] = ["city_id", "lat", "lon", "service_time_s", "vehicle"];

pub fn load_deliveries_csv(path: &Path, tess: &Tessellation) -> Result<LoadedDeliveries> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(e).context(format!("opening {}", path.display())))?;
    read_deliveries_csv(file, tess)
}

pub fn read_deliveries_csv<R: Read>(reader: R, tess: &Tessellation) -> Result<LoadedDeliveries> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let has_route = match header.len() {
        5 => false,
        6 if header[5] == "route_id" => true,
        _ => {
            return Err(Error::Schema(format!(
                "expected header city_id,lat,lon,service_time_s,vehicle[,route_id], got {}",
                header.join(",")
            )))
        }
    };
    if header[..5] != DELIVERY_HEADER {
        return Err(Error::Schema(format!(
            "expected header city_id,lat,lon,service_time_s,vehicle[,route_id], got {}",
            header.join(",")
        )));
    }
    let mut out = LoadedDeliveries::default();
    let mut total = 0;
    for (i, row) in rdr.records().enumerate() {
        total += 1;
        let row = row?;
        match parse_delivery(&row, has_route, tess) {
            Ok(rec) => out.records.push(rec),
            Err(message) => out.rejected.push(RowError { row: i + 1, message }),
        }
    }
    if out.rejected.len() * 10 > total {
        return Err(Error::Ingest {
            rejected: out.rejected.len(),
            total,
            first: out.rejected[0].to_string(),
        });
    }
    Ok(out)
}

fn parse_delivery(
    row: &csv::StringRecord,
    has_route: bool,
    tess: &Tessellation,
) -> std::result::Result<DeliveryRecord, String> {
    let expected = if has_route { 6 } else { 5 };
    if row.len() != expected {
        return Err(format!("expected {expected} fields, got {}", row.len()));
    }
    let num = |i: usize, name: &str| -> std::result::Result<f64, String> {
        row[i]
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("{name} {:?} is not a number", &row[i]))
    };
    let city_id = row[0].trim().to_string();
    if city_id != tess.city_id {
        return Err(format!(
            "city {city_id:?} does not match tessellation {:?}",
            tess.city_id
        ));
    }
    let point = GeoPoint::new(num(1, "lat")?, num(2, "lon")?).map_err(|e| e.to_string())?;
    let service_time_s = num(3, "service_time_s")?;
    if !(service_time_s > 0.0 && service_time_s <= MAX_SERVICE_TIME_S) {
        return Err(format!("service_time_s {service_time_s} outside (0, 86400]"));
    }
    let vehicle = row[4].parse()?;
    let route_id = if has_route && !row[5].trim().is_empty() {
        Some(row[5].trim().to_string())
    } else {
        None
    };
    let cell = tess.point_to_axial(point).map_err(|e| e.to_string())?;
    Ok(DeliveryRecord {
        city_id,
        point,
        cell,
        service_time_s,
        vehicle,
        route_id,
    })
}

pub fn write_deliveries_csv<W: Write>(writer: W, records: &[DeliveryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["city_id", "lat", "lon", "service_time_s", "vehicle", "route_id"])?;
    for r in records {
        w.write_record([
            r.city_id.clone(),
            r.point.lat.to_string(),
            r.point.lon.to_string(),
            r.service_time_s.to_string(),
            r.vehicle.as_str().to_string(),
            r.route_id.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::Io(e).context(format!("creating {}", path.display())))?,
    );
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(e).context(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| json_parse_error(&text, &e).context(path.display().to_string()))
}

// ---------------------------------------------------------------------------
// Synthetic cities

/// Four tags per super-tag, in super-tag order.
pub const SYNTH_TAGS: [&str; 36] = [
    "building=apartments",
    "building=house",
    "building=residential",
    "landuse=residential",
    "highway=service",
    "highway=residential",
    "highway=bus_stop",
    "amenity=parking",
    "natural=tree",
    "natural=water",
    "natural=wood",
    "landuse=grass",
    "amenity=cafe",
    "amenity=restaurant",
    "amenity=bench",
    "amenity=fast_food",
    "leisure=park",
    "leisure=playground",
    "leisure=pitch",
    "sport=soccer",
    "barrier=fence",
    "barrier=wall",
    "barrier=gate",
    "barrier=bollard",
    "power=pole",
    "emergency=fire_hydrant",
    "amenity=post_box",
    "man_made=street_cabinet",
    "shop=convenience",
    "shop=supermarket",
    "office=company",
    "craft=electrician",
    "historic=memorial",
    "tourism=museum",
    "amenity=place_of_worship",
    "historic=building",
];

const N_ARCHETYPES: usize = 4;

/// Mean count per tag for each archetype, by super-tag group.
const ARCHETYPE_RATES: [[f64; 9]; N_ARCHETYPES] = [
    // downtown core: transport and commerce heavy
    [4.0, 10.0, 0.3, 5.0, 0.5, 0.8, 3.0, 8.0, 1.0],
    // residential
    [10.0, 2.0, 1.0, 0.5, 1.0, 5.0, 0.5, 0.3, 0.2],
    // green and leisure
    [0.5, 0.8, 8.0, 0.3, 7.0, 1.5, 0.2, 0.1, 0.3],
    // cultural and amenity mix
    [3.0, 2.0, 0.5, 8.0, 2.0, 0.3, 1.0, 1.5, 8.0],
];

/// Tag-within-group weights; multiplies the group rate.
const TAG_WEIGHTS: [f64; 4] = [1.4, 1.1, 0.9, 0.6];
const ZERO_INFLATION: f64 = 0.2;

/// Log-scale service time offsets per archetype, scaled by `context_effect`.
pub const ARCHETYPE_MU_OFFSETS: [f64; N_ARCHETYPES] = [0.6, 0.2, -0.2, -0.6];
const ARCHETYPE_SIGMA_LOG_OFFSETS: [f64; N_ARCHETYPES] = [0.15, -0.05, -0.15, 0.05];
pub const SYNTH_BASE_MU: f64 = 5.0;
pub const SYNTH_BASE_SIGMA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cells: usize,
    pub n_deliveries: usize,
    pub context_effect: f64,
    pub city_id: String,
    pub origin: GeoPoint,
    pub edge_m: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_cells: usize, n_deliveries: usize, context_effect: f64) -> Self {
        Self {
            seed,
            n_cells,
            n_deliveries,
            context_effect,
            city_id: "synth".into(),
            origin: GeoPoint {
                lat: 47.6,
                lon: -122.33,
            },
            edge_m: crate::geo::DEFAULT_EDGE_M,
        }
    }

    pub fn with_city(mut self, city_id: impl Into<String>, origin: GeoPoint) -> Self {
        self.city_id = city_id.into();
        self.origin = origin;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub seed: u64,
    pub context_effect: f64,
    pub cells: Vec<[i32; 2]>,
    pub archetype: Vec<usize>,
    pub mu_true: Vec<f64>,
    pub sigma_true: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthCity {
    pub tess: Tessellation,
    pub features: RegionFeatureMatrix,
    pub deliveries: Vec<DeliveryRecord>,
    pub truth: SynthGroundTruth,
}

pub fn synth_vocabulary() -> TagVocabulary {
    TagVocabulary::new(SYNTH_TAGS.iter().map(|s| s.to_string()).collect(), DEFAULT_SUPER_MAP)
        .expect("synthetic vocabulary is valid")
}

/// Generates a city with four planted region archetypes. Archetypes occupy
/// contiguous sectors around the origin; each cell's tag counts follow its
/// archetype's zero-inflated Poisson profile, and its service times are drawn
/// from Lognormal(mu_true, sigma_true).
pub fn synth_city(cfg: &SynthConfig) -> Result<SynthCity> {
    if cfg.n_cells < 16 {
        return Err(Error::Config(format!("n_cells must be >= 16, got {}", cfg.n_cells)));
    }
    if cfg.n_deliveries < 10 * cfg.n_cells {
        return Err(Error::Config(format!(
            "n_deliveries must be >= 10 * n_cells ({}), got {}",
            10 * cfg.n_cells,
            cfg.n_deliveries
        )));
    }
    if !(cfg.context_effect >= 0.0 && cfg.context_effect.is_finite()) {
        return Err(Error::Config("context_effect must be >= 0".into()));
    }
    let tess = Tessellation::new(&cfg.city_id, cfg.origin, cfg.edge_m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut radius = 0;
    while crate::geo::disk_size(radius) < cfg.n_cells {
        radius += 1;
    }
    let cells: Vec<Axial> = Axial::ORIGIN.spiral(radius).into_iter().take(cfg.n_cells).collect();

    // sector anchors
    let theta0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let reach = 0.6 * radius as f64 * 1.5 * tess.edge_m;
    let anchors: Vec<PlanarXY> = (0..N_ARCHETYPES)
        .map(|k| {
            let a = theta0 + k as f64 * std::f64::consts::TAU / N_ARCHETYPES as f64;
            PlanarXY {
                x: reach * a.cos(),
                y: reach * a.sin(),
            }
        })
        .collect();
    let archetype: Vec<usize> = cells
        .iter()
        .map(|c| {
            let xy = tess.center_xy(*c);
            (0..N_ARCHETYPES)
                .min_by(|&a, &b| xy.dist(anchors[a]).total_cmp(&xy.dist(anchors[b])))
                .expect("four anchors")
        })
        .collect();

    let vocab = Arc::new(synth_vocabulary());
    let w = vocab.len();
    let mut counts = Vec::with_capacity(cells.len() * w);
    for &a in &archetype {
        let cell_scale = (0.25 * rng.sample::<f64, _>(StandardNormal)).exp();
        for j in 0..w {
            let rate = ARCHETYPE_RATES[a][j / 4] * TAG_WEIGHTS[j % 4] * cell_scale;
            let zero = rng.gen_bool(ZERO_INFLATION);
            let draw = Poisson::new(rate.max(1e-9))
                .map_err(|e| Error::Config(e.to_string()))?
                .sample(&mut rng);
            counts.push(if zero { 0 } else { draw as u32 });
        }
    }

    let ce = cfg.context_effect;
    let mu_true: Vec<f64> = archetype
        .iter()
        .map(|&a| SYNTH_BASE_MU + ce * ARCHETYPE_MU_OFFSETS[a])
        .collect();
    let sigma_true: Vec<f64> = archetype
        .iter()
        .map(|&a| SYNTH_BASE_SIGMA * (ce * ARCHETYPE_SIGMA_LOG_OFFSETS[a]).exp())
        .collect();

    // uneven delivery density across cells
    let weights: Vec<f64> = cells
        .iter()
        .map(|_| (0.5 * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let inner = 0.8 * tess.edge_m * 3f64.sqrt() / 2.0;
    let mut deliveries = Vec::with_capacity(cfg.n_deliveries);
    for i in 0..cfg.n_deliveries {
        let idx = pick.sample(&mut rng);
        let cell = cells[idx];
        let c = tess.center_xy(cell);
        let rad = inner * rng.gen::<f64>().sqrt();
        let ang = rng.gen_range(0.0..std::f64::consts::TAU);
        let point = tess.unproject(PlanarXY {
            x: c.x + rad * ang.cos(),
            y: c.y + rad * ang.sin(),
        });
        debug_assert_eq!(tess.point_to_axial(point).ok(), Some(cell));
        let service_time_s = loop {
            let z: f64 = rng.sample(StandardNormal);
            let t = (mu_true[idx] + sigma_true[idx] * z).exp();
            if t <= MAX_SERVICE_TIME_S {
                break t;
            }
        };
        deliveries.push(DeliveryRecord {
            city_id: cfg.city_id.clone(),
            point,
            cell,
            service_time_s,
            vehicle: Vehicle::Van,
            route_id: Some(format!("R{}", i / 100)),
        });
    }

    let features = RegionFeatureMatrix::new(&cfg.city_id, vocab, cells.clone(), counts)?;
    Ok(SynthCity {
        tess,
        features,
        deliveries,
        truth: SynthGroundTruth {
            seed: cfg.seed,
            context_effect: ce,
            cells: cells.iter().map(|c| [c.q, c.r]).collect(),
            archetype,
            mu_true,
            sigma_true,
        },
    })
}

impl SynthCity {
    /// Explodes the tag counts into one GeoJSON point feature per tag
    /// occurrence, scattered inside its cell.
    pub fn tagged_geojson(&self, seed: u64) -> Value {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let inner = 0.8 * self.tess.edge_m * 3f64.sqrt() / 2.0;
        let mut features = Vec::new();
        for (i, &cell) in self.features.cells().iter().enumerate() {
            let c = self.tess.center_xy(cell);
            for (j, &n) in self.features.row(i).iter().enumerate() {
                let (k, v) = self.features.vocab.subtags()[j]
                    .split_once('=')
                    .expect("vocabulary entries are key=value");
                for _ in 0..n {
                    let rad = inner * rng.gen::<f64>().sqrt();
                    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                    let p = self.tess.unproject(PlanarXY {
                        x: c.x + rad * ang.cos(),
                        y: c.y + rad * ang.sin(),
                    });
                    features.push(serde_json::json!({
                        "type": "Feature",
                        "geometry": {"type": "Point", "coordinates": [p.lon, p.lat]},
                        "properties": {k: v},
                    }));
                }
            }
        }
        serde_json::json!({"type": "FeatureCollection", "features": features})
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tess() -> Tessellation {
        Tessellation::with_default_edge("t", GeoPoint { lat: 50.85, lon: 4.35 }).unwrap()
    }

    #[test]
    fn bundled_vocabularies() {
        let v = TagVocabulary::default_754();
        assert_eq!(v.len(), 754);
        assert_eq!(TagVocabulary::default_681().len(), 681);
        for j in 0..v.len() {
            assert!(v.super_tag_of(j).is_some(), "{} unmatched", v.subtags()[j]);
        }
    }

    #[test]
    fn super_tag_examples() {
        let v = TagVocabulary::default_754();
        assert_eq!(v.classify("highway=service"), Some("Transportation"));
        assert_eq!(v.classify("building=house"), Some("Built Environment"));
        assert_eq!(v.classify("building=yes"), Some("Built Environment"));
        assert_eq!(v.classify("historic=castle"), Some("Historical & Cultural"));
        assert_eq!(v.classify("shop=bakery"), Some("Commerce & Industry"));
        assert_eq!(v.classify("foo=bar"), None);
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let r = TagVocabulary::new(vec!["a=b".into(), "a=b".into()], DEFAULT_SUPER_MAP);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn geojson_points_and_polygons() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","geometry":{"type":"Point","coordinates":[4.35,50.85]},"properties":{"building":"yes"}},
            {"type":"Feature","geometry":{"type":"Polygon","coordinates":[[[0,0],[0,2],[2,2],[2,0],[0,0]]]},"properties":{"landuse":"grass","levels":3}},
            {"type":"Feature","geometry":{"type":"LineString","coordinates":[[4.0,50.0],[4.1,50.1]]},"properties":null}
        ]}"#;
        let feats = parse_tagged_geojson(text).unwrap();
        assert_eq!(feats.len(), 3);
        assert_eq!(feats[0].tags["building"], "yes");
        assert!((feats[1].point.lat - 1.0).abs() < 1e-12 && (feats[1].point.lon - 1.0).abs() < 1e-12);
        assert_eq!(feats[1].tags["levels"], "3");
        assert_eq!(feats[2].point, GeoPoint { lat: 50.0, lon: 4.0 });
    }

    #[test]
    fn geojson_errors() {
        let err = parse_tagged_geojson("{\"type\": \"FeatureCollection\",\n \"features\": [,]}").unwrap_err();
        match err {
            Error::Parse { offset, line, .. } => {
                assert_eq!(line, 2);
                assert!(offset > 30 && offset < 50, "{offset}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_tagged_geojson(r#"{"type":"FeatureCollection","features":[]}"#),
            Err(Error::EmptyCollection)
        ));
        let nested = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","geometry":{"type":"Point","coordinates":[0,0]},"properties":{}},
            {"type":"Feature","geometry":{"type":"Point","coordinates":[0,0]},"properties":{"a":{"b":1}}}]}"#;
        assert!(matches!(
            parse_tagged_geojson(nested),
            Err(Error::Feature { index: 1, .. })
        ));
    }

    fn feature(t: &Tessellation, cell: Axial, tags: &[(&str, &str)]) -> TaggedFeature {
        TaggedFeature {
            point: t.cell_center(cell),
            tags: tags.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    #[test]
    fn feature_matrix_counts_and_drops() {
        let t = tess();
        let vocab = Arc::new(TagVocabulary::default_754());
        let c = Axial::new(2, -1);
        let recs = vec![
            feature(&t, c, &[("building", "yes")]),
            feature(&t, c, &[("building", "yes")]),
            feature(&t, c, &[("building", "yes"), ("highway", "service")]),
            feature(&t, Axial::new(0, 3), &[("unknown", "tag")]),
        ];
        let (m, report) = build_feature_matrix(&recs, &t, vocab.clone(), false).unwrap();
        assert_eq!(m.cells(), &[c]);
        assert_eq!(m.count(c, "building=yes"), 3);
        assert_eq!(m.count(c, "highway=service"), 1);
        assert_eq!(report.dropped["unknown=tag"], 1);

        let (m2, _) = build_feature_matrix(&recs, &t, vocab, true).unwrap();
        assert_eq!(m2.cells().len(), 2);
        assert!(m2.row_of(Axial::new(0, 3)).unwrap().iter().all(|&x| x == 0));
    }

    #[test]
    fn rollup_conserves_mass() {
        let t = tess();
        let vocab = Arc::new(TagVocabulary::default_754());
        let recs = vec![
            feature(&t, Axial::ORIGIN, &[("highway", "service"), ("building", "house")]),
            feature(&t, Axial::ORIGIN, &[("building", "yes")]),
        ];
        let (m, _) = build_feature_matrix(&recs, &t, vocab, false).unwrap();
        let roll = super_tag_rollup(&m);
        assert_eq!(roll[0][0], 2);
        assert_eq!(roll[0][1], 1);
        assert_eq!(
            roll[0].iter().sum::<u64>(),
            m.row(0).iter().map(|&x| x as u64).sum::<u64>()
        );

        let empty = RegionFeatureMatrix::new("t", m.vocab.clone(), vec![], vec![]).unwrap();
        assert!(super_tag_rollup(&empty).is_empty());
    }

    #[test]
    fn deliveries_csv_validation() {
        let t = tess();
        let mut text = String::from("city_id,lat,lon,service_time_s,vehicle,route_id\n");
        for i in 0..20 {
            text += &format!("t,50.85,4.35{i},{},van,r1\n", 60 + i);
        }
        text += "t,50.85,4.35,-5,van,r1\n";
        let loaded = read_deliveries_csv(text.as_bytes(), &t).unwrap();
        assert_eq!(loaded.records.len(), 20);
        assert_eq!(loaded.rejected.len(), 1);
        assert_eq!(loaded.rejected[0].row, 21);
        assert_eq!(
            loaded.records[0].cell,
            t.point_to_axial(loaded.records[0].point).unwrap()
        );

        text += "t,50.85,4.35,100000,van,r1\nt,50.85,4.35,abc,van,r1\n";
        assert!(matches!(
            read_deliveries_csv(text.as_bytes(), &t),
            Err(Error::Ingest { .. })
        ));

        let bad_header = "city,lat,lon,service_time_s,vehicle\n";
        assert!(matches!(
            read_deliveries_csv(bad_header.as_bytes(), &t),
            Err(Error::Schema(_))
        ));
        let no_route = "city_id,lat,lon,service_time_s,vehicle\nt,50.85,4.35,12.5,cargo_bike\n";
        let l = read_deliveries_csv(no_route.as_bytes(), &t).unwrap();
        assert_eq!(l.records[0].vehicle, Vehicle::CargoBike);
        assert_eq!(l.records[0].route_id, None);
    }

    #[test]
    fn deliveries_round_trip() {
        let t = tess();
        let city = synth_city(&SynthConfig::new(3, 20, 200, 1.0).with_city("t", t.origin)).unwrap();
        let mut buf = Vec::new();
        write_deliveries_csv(&mut buf, &city.deliveries).unwrap();
        let back = read_deliveries_csv(buf.as_slice(), &t).unwrap();
        assert!(back.rejected.is_empty());
        assert_eq!(back.records, city.deliveries);
    }

    #[test]
    fn synth_preconditions_and_determinism() {
        assert!(matches!(
            synth_city(&SynthConfig::new(1, 10, 1000, 1.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            synth_city(&SynthConfig::new(1, 20, 100, 1.0)),
            Err(Error::Config(_))
        ));
        let a = synth_city(&SynthConfig::new(7, 50, 600, 1.0)).unwrap();
        let b = synth_city(&SynthConfig::new(7, 50, 600, 1.0)).unwrap();
        assert_eq!(a.deliveries, b.deliveries);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.features.to_file(), b.features.to_file());
        for d in &a.deliveries {
            assert_eq!(a.tess.point_to_axial(d.point).unwrap(), d.cell);
        }
        let flat = synth_city(&SynthConfig::new(7, 50, 600, 0.0)).unwrap();
        assert!(flat.truth.mu_true.iter().all(|m| *m == flat.truth.mu_true[0]));
        assert!(flat.truth.sigma_true.iter().all(|s| *s == flat.truth.sigma_true[0]));
        let mut seen = a.truth.archetype.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn synth_geojson_reingests_to_same_counts() {
        let city = synth_city(&SynthConfig::new(5, 30, 300, 1.0)).unwrap();
        let gj = city.tagged_geojson(5);
        let feats = parse_tagged_geojson(&gj.to_string()).unwrap();
        let (m, report) = build_feature_matrix(&feats, &city.tess, city.features.vocab.clone(), false).unwrap();
        assert!(report.dropped.is_empty());
        for (i, &c) in city.features.cells().iter().enumerate() {
            let expected = city.features.row(i);
            match m.row_of(c) {
                Some(row) => assert_eq!(row, expected),
                None => assert!(expected.iter().all(|&x| x == 0)),
            }
        }
    }
}
