//! Agglomerative clustering of cell embeddings, relabelling by service time,
//! and per-cluster super-tag profiles.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::{empirical_quantile, CellTimes};
use crate::error::{Error, Result};
use crate::geo::Axial;
use crate::ingest::{super_tag_rollup, RegionFeatureMatrix, SUPER_TAGS};

pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
    Average,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OrderingStat {
    #[default]
    Median,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cells: Vec<Axial>,
    /// 1-based labels, parallel to `cells`.
    pub labels: Vec<usize>,
    pub k: usize,
    /// Set once labels have been ordered by service time.
    pub ordering_stat: Option<OrderingStat>,
}

/// Condensed upper-triangular distance storage.
struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

/// Bottom-up merging until `k` clusters remain. Rows of `vectors` are points
/// of dimension `dim`. Among equally close pairs the one with the smallest
/// (lower index, higher index) wins, a cluster being indexed by its smallest
/// member. Labels are 1-based in order of each cluster's first member.
pub fn agglomerate(vectors: &[f64], dim: usize, k: usize, linkage: Linkage) -> Result<Vec<usize>> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: vectors.len(),
        });
    }
    let n = vectors.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("embedding vectors must be finite".into()));
    }
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut dist = Condensed {
        n,
        d: vec![0.0; n * n.saturating_sub(1) / 2],
    };
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist.set(i, j, if linkage == Linkage::Ward { sq } else { sq.sqrt() });
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();
    // nearest active partner with a larger index
    let mut nn = vec![usize::MAX; n];
    let mut nnd = vec![f64::INFINITY; n];
    let rescan = |i: usize, active: &[bool], dist: &Condensed, nn: &mut [usize], nnd: &mut [f64]| {
        nn[i] = usize::MAX;
        nnd[i] = f64::INFINITY;
        for (j, _) in active.iter().enumerate().skip(i + 1).filter(|(_, on)| **on) {
            let d = dist.get(i, j);
            if d < nnd[i] {
                nnd[i] = d;
                nn[i] = j;
            }
        }
    };
    for i in 0..n {
        rescan(i, &active, &dist, &mut nn, &mut nnd);
    }

    for _ in 0..n - k {
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && (a == usize::MAX || nnd[i] < nnd[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        let dab = dist.get(a, b);
        active[b] = false;
        parent[b] = a;
        for c in 0..n {
            if !active[c] || c == a {
                continue;
            }
            let (dac, dbc) = (dist.get(a, c), dist.get(b, c));
            let nc = size[c] as f64;
            let merged = match linkage {
                Linkage::Ward => ((na + nc) * dac + (nb + nc) * dbc - nc * dab) / (na + nb + nc),
                Linkage::Average => (na * dac + nb * dbc) / (na + nb),
            };
            dist.set(a, c, merged);
        }
        size[a] += size[b];
        rescan(a, &active, &dist, &mut nn, &mut nnd);
        for c in 0..a {
            if !active[c] {
                continue;
            }
            if nn[c] == a || nn[c] == b {
                rescan(c, &active, &dist, &mut nn, &mut nnd);
            } else {
                let d = dist.get(c, a);
                if d < nnd[c] || (d == nnd[c] && a < nn[c]) {
                    nnd[c] = d;
                    nn[c] = a;
                }
            }
        }
        for c in a + 1..b {
            if active[c] && nn[c] == b {
                rescan(c, &active, &dist, &mut nn, &mut nnd);
            }
        }
    }

    Ok(labels_from_parents(&mut parent))
}

fn labels_from_parents(parent: &mut [usize]) -> Vec<usize> {
    fn root(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        parent[i] = r;
        r
    }
    let n = parent.len();
    let mut label_of_root = HashMap::new();
    (0..n)
        .map(|i| {
            let r = root(parent, i);
            let next = label_of_root.len() + 1;
            *label_of_root.entry(r).or_insert(next)
        })
        .collect()
}

/// Clusters the rows of an embedding matrix into `k` groups.
pub fn cluster_embeddings(m: &crate::embed::EmbeddingMatrix, k: usize, linkage: Linkage) -> Result<ClusterAssignment> {
    let labels = agglomerate(&m.values, m.dim, k, linkage)?;
    Ok(ClusterAssignment {
        cells: m.cells.clone(),
        labels,
        k,
        ordering_stat: None,
    })
}

/// Relabels so that cluster 1 has the highest service-time statistic.
/// Clusters without deliveries go last; ties keep the original label order.
pub fn order_by_service_time(
    a: &ClusterAssignment,
    times: &CellTimes,
    stat: OrderingStat,
) -> Result<ClusterAssignment> {
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); a.k];
    for (cell, &label) in a.cells.iter().zip(&a.labels) {
        pooled[label - 1].extend_from_slice(times.cell(*cell));
    }
    if pooled.iter().all(Vec::is_empty) {
        return Err(Error::NoDeliveries);
    }
    let value: Vec<Option<f64>> = pooled
        .iter_mut()
        .map(|v| {
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(match stat {
                OrderingStat::Median => empirical_quantile(v, 0.5),
                OrderingStat::Mean => v.iter().sum::<f64>() / v.len() as f64,
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..a.k).collect();
    order.sort_by(|&x, &y| match (value[x], value[y]) {
        (Some(p), Some(q)) => q.total_cmp(&p).then(x.cmp(&y)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => x.cmp(&y),
    });
    let mut new_label = vec![0; a.k];
    for (rank, &old) in order.iter().enumerate() {
        new_label[old] = rank + 1;
    }
    Ok(ClusterAssignment {
        cells: a.cells.clone(),
        labels: a.labels.iter().map(|&l| new_label[l - 1]).collect(),
        k: a.k,
        ordering_stat: Some(stat),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_cells: usize,
    /// Mean super-tag counts, keyed by super-tag name.
    pub mean_super_tags: BTreeMap<String, f64>,
    #[serde(skip)]
    pub mean_vector: [f64; 9],
}

/// Per-cluster mean super-tag profile, keyed by label.
pub fn cluster_summary(a: &ClusterAssignment, m: &RegionFeatureMatrix) -> Result<BTreeMap<usize, ClusterSummary>> {
    let rollup = super_tag_rollup(m);
    let mut sums: BTreeMap<usize, ([f64; 9], usize)> = BTreeMap::new();
    for (cell, &label) in a.cells.iter().zip(&a.labels) {
        let i = m
            .index_of(*cell)
            .ok_or_else(|| Error::Config(format!("cell {cell} is not in the feature matrix")))?;
        let entry = sums.entry(label).or_insert(([0.0; 9], 0));
        for (s, v) in entry.0.iter_mut().zip(rollup[i]) {
            *s += v as f64;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(label, (sum, n))| {
            let mean = sum.map(|s| s / n as f64);
            let named = SUPER_TAGS.iter().zip(mean).map(|(k, v)| (k.to_string(), v)).collect();
            (
                label,
                ClusterSummary {
                    n_cells: n,
                    mean_super_tags: named,
                    mean_vector: mean,
                },
            )
        })
        .collect())
}

pub fn summary_json(summary: &BTreeMap<usize, ClusterSummary>) -> serde_json::Value {
    let obj: serde_json::Map<String, serde_json::Value> = summary
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::to_value(v).expect("plain data")))
        .collect();
    serde_json::Value::Object(obj)
}

pub fn write_assignment_csv<W: Write>(writer: W, a: &ClusterAssignment) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cell_q", "cell_r", "cluster"])?;
    for (c, l) in a.cells.iter().zip(&a.labels) {
        w.write_record([c.q.to_string(), c.r.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignment_csv<R: std::io::Read>(reader: R) -> Result<ClusterAssignment> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut cells = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<i64> {
            rec.get(j)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Schema(format!("assignment row {}: bad field {j}", i + 1)))
        };
        cells.push(Axial::new(parse(0)? as i32, parse(1)? as i32));
        let l = parse(2)?;
        if l < 1 {
            return Err(Error::Schema(format!("assignment row {}: label {l} < 1", i + 1)));
        }
        labels.push(l as usize);
    }
    let k = labels.iter().copied().max().unwrap_or(0);
    Ok(ClusterAssignment {
        cells,
        labels,
        k,
        ordering_stat: None,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let comb2 = |x: usize| (x * x.saturating_sub(1) / 2) as f64;
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let sa: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sb: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(n).max(1.0);
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both partitions trivial in the same way
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
