//! Second-order gradient-boosted regression trees, a squared-error ensemble,
//! and a two-head lognormal ensemble trained on negative log-likelihood.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::FittedLognormal;
use crate::error::{Error, Result};

/// Dense row-major feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                expected: rows * cols,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature values must be finite".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                expected: cols,
                actual: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> FeatureTable {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        FeatureTable {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub max_depth: usize,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let node = self
                .nodes
                .get(i)
                .ok_or_else(|| Error::Schema(format!("tree node {i} out of range")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Schema(format!("tree node {i} reached twice")));
            }
            match *node {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(Error::Schema("non-finite leaf value".into()))
                }
                Node::Leaf { .. } => {}
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= n_features || !threshold.is_finite() {
                        return Err(Error::Schema(format!("bad split at node {i}")));
                    }
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Schema("unreachable tree nodes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub lambda: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 4,
            min_child_weight: 5.0,
            lambda: 1.0,
        }
    }
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Per-feature ascending row order, ties broken by row index.
pub struct Presorted {
    order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: &FeatureTable) -> Self {
        let order = (0..x.cols)
            .into_par_iter()
            .map(|j| {
                let mut idx: Vec<u32> = (0..x.rows as u32).collect();
                idx.sort_by(|&a, &b| x.get(a as usize, j).total_cmp(&x.get(b as usize, j)).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self { order }
    }
}

/// Exact greedy level-wise tree growth on gradients `g` and hessians `h`.
pub fn tree_fit(x: &FeatureTable, g: &[f64], h: &[f64], params: &TreeParams) -> Result<RegressionTree> {
    tree_fit_presorted(x, &Presorted::new(x), g, h, params)
}

pub fn tree_fit_presorted(
    x: &FeatureTable,
    sorted: &Presorted,
    g: &[f64],
    h: &[f64],
    params: &TreeParams,
) -> Result<RegressionTree> {
    if g.len() != x.rows || h.len() != x.rows {
        return Err(Error::LengthMismatch(g.len().min(h.len()), x.rows));
    }
    if h.iter().any(|v| !(*v >= 0.0)) || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("hessians must be >= 0 and gradients finite".into()));
    }
    let lambda = params.lambda;
    // node id per row; usize::MAX once the row sits in a finished leaf
    let mut node_of = vec![0usize; x.rows];
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut sums = vec![(g.iter().sum::<f64>(), h.iter().sum::<f64>())];
    let mut frontier = vec![0usize];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        // frontier slot of each node id
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &n) in frontier.iter().enumerate() {
            slot[n] = s;
        }
        let per_feature: Vec<Vec<Option<Candidate>>> = (0..x.cols)
            .into_par_iter()
            .map(|j| {
                let mut best: Vec<Option<Candidate>> = vec![None; frontier.len()];
                let mut left = vec![(0.0f64, 0.0f64); frontier.len()];
                let mut last: Vec<Option<f64>> = vec![None; frontier.len()];
                for &r in &sorted.order[j] {
                    let r = r as usize;
                    let n = node_of[r];
                    if n == usize::MAX || slot[n] == usize::MAX {
                        continue;
                    }
                    let s = slot[n];
                    let v = x.get(r, j);
                    if let Some(prev) = last[s] {
                        if v > prev {
                            let (gl, hl) = left[s];
                            let (gt, ht) = sums[n];
                            let (gr, hr) = (gt - gl, ht - hl);
                            if hl >= params.min_child_weight && hr >= params.min_child_weight {
                                let gain =
                                    0.5 * (score(gl, hl, lambda) + score(gr, hr, lambda) - score(gt, ht, lambda));
                                if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                                    best[s] = Some(Candidate {
                                        gain,
                                        feature: j,
                                        threshold: prev + (v - prev) / 2.0,
                                    });
                                }
                            }
                        }
                    }
                    left[s].0 += g[r];
                    left[s].1 += h[r];
                    last[s] = Some(v);
                }
                best
            })
            .collect();

        let mut next = Vec::new();
        let mut child_of: Vec<Option<(usize, usize, usize, f64)>> = vec![None; frontier.len()];
        for (s, &n) in frontier.iter().enumerate() {
            let mut chosen: Option<Candidate> = None;
            for cands in &per_feature {
                if let Some(c) = cands[s] {
                    if chosen.is_none_or(|b| c.gain > b.gain) {
                        chosen = Some(c);
                    }
                }
            }
            if let Some(c) = chosen {
                let l = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                sums.push((0.0, 0.0));
                sums.push((0.0, 0.0));
                nodes[n] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left: l,
                    right: l + 1,
                };
                child_of[s] = Some((l, l + 1, c.feature, c.threshold));
                next.push(l);
                next.push(l + 1);
            }
        }
        for r in 0..x.rows {
            let n = node_of[r];
            if n == usize::MAX || slot[n] == usize::MAX {
                continue;
            }
            match child_of[slot[n]] {
                Some((l, rr, f, t)) => {
                    let c = if x.get(r, f) < t { l } else { rr };
                    node_of[r] = c;
                    sums[c].0 += g[r];
                    sums[c].1 += h[r];
                }
                None => node_of[r] = usize::MAX,
            }
        }
        frontier = next;
    }
    for (i, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { value } = node {
            let (gs, hs) = sums[i];
            *value = -gs / (hs + lambda);
        }
    }
    Ok(RegressionTree {
        nodes,
        max_depth: params.max_depth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub tree: TreeParams,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            learning_rate: 0.1,
            tree: TreeParams::default(),
        }
    }
}

impl BoostParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if !(self.tree.lambda >= 0.0) || !(self.tree.min_child_weight >= 0.0) {
            return Err(Error::Config("lambda and min_child_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtEnsemble {
    pub base_score: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
}

impl GbtEnsemble {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict(&self, x: &FeatureTable) -> Result<Vec<f64>> {
        check_width(self.n_features, x)?;
        Ok((0..x.rows).map(|i| self.predict_row(x.row(i))).collect())
    }

    fn validate(&self) -> Result<()> {
        if !self.base_score.is_finite() || !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Schema("bad ensemble header".into()));
        }
        self.trees.iter().try_for_each(|t| t.validate(self.n_features))
    }
}

fn check_width(n_features: usize, x: &FeatureTable) -> Result<()> {
    if x.cols != n_features {
        return Err(Error::Shape {
            expected: n_features,
            actual: x.cols,
        });
    }
    Ok(())
}

/// Identical feature rows collapsed to one representative each. Trees fitted
/// on the representatives with summed gradients and hessians choose the same
/// splits as trees fitted on all rows.
struct RowGroups {
    unique: FeatureTable,
    of_row: Vec<usize>,
    sorted: Presorted,
}

impl RowGroups {
    fn new(x: &FeatureTable) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut firsts = Vec::new();
        let of_row = (0..x.rows)
            .map(|i| {
                let key: Vec<u64> = x.row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
                *index.entry(key).or_insert_with(|| {
                    firsts.push(i);
                    firsts.len() - 1
                })
            })
            .collect();
        let unique = x.select(&firsts);
        let sorted = Presorted::new(&unique);
        Self { unique, of_row, sorted }
    }

    /// Fit one tree and return it with its output per row.
    fn fit(&self, g: &[f64], h: &[f64], params: &TreeParams) -> Result<(RegressionTree, Vec<f64>)> {
        let m = self.unique.rows;
        let (mut gs, mut hs) = (vec![0.0; m], vec![0.0; m]);
        for (i, &k) in self.of_row.iter().enumerate() {
            gs[k] += g[i];
            hs[k] += h[i];
        }
        let tree = tree_fit_presorted(&self.unique, &self.sorted, &gs, &hs, params)?;
        let vals: Vec<f64> = (0..m).map(|k| tree.predict(self.unique.row(k))).collect();
        Ok((tree, self.of_row.iter().map(|&k| vals[k]).collect()))
    }
}

const MIN_ROWS: usize = 10;

fn check_rows(x: &FeatureTable, y: &[f64]) -> Result<()> {
    if y.len() != x.rows {
        return Err(Error::LengthMismatch(y.len(), x.rows));
    }
    if x.rows == 0 {
        return Err(Error::Config("no training rows".into()));
    }
    if x.rows < MIN_ROWS {
        return Err(Error::InsufficientData(format!(
            "boosting needs >= {MIN_ROWS} rows, got {}",
            x.rows
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("targets must be finite".into()));
    }
    Ok(())
}

/// Squared-error boosting; also returns training MSE after each round
/// (index 0 is the base score alone).
pub fn gbt_fit_traced(x: &FeatureTable, y: &[f64], p: &BoostParams) -> Result<(GbtEnsemble, Vec<f64>)> {
    check_rows(x, y)?;
    p.validate()?;
    let n = y.len() as f64;
    let base = y.iter().sum::<f64>() / n;
    let groups = RowGroups::new(x);
    let mut pred = vec![base; y.len()];
    let h = vec![1.0; y.len()];
    let mse = |pred: &[f64]| pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let mut trace = vec![mse(&pred)];
    let mut trees = Vec::with_capacity(p.n_trees);
    for _ in 0..p.n_trees {
        let g: Vec<f64> = pred.iter().zip(y).map(|(a, b)| a - b).collect();
        let (tree, out) = groups.fit(&g, &h, &p.tree)?;
        for (v, o) in pred.iter_mut().zip(&out) {
            *v += p.learning_rate * o;
        }
        trees.push(tree);
        trace.push(mse(&pred));
    }
    Ok((
        GbtEnsemble {
            base_score: base,
            learning_rate: p.learning_rate,
            n_features: x.cols,
            trees,
        },
        trace,
    ))
}

pub fn gbt_fit(x: &FeatureTable, y: &[f64], p: &BoostParams) -> Result<GbtEnsemble> {
    Ok(gbt_fit_traced(x, y, p)?.0)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
pub const S_HESSIAN_FLOOR: f64 = 1e-6;

/// Lognormal NLL at (mu, s = ln sigma).
pub fn lognormal_nll(y: f64, mu: f64, s: f64) -> f64 {
    let z = y.ln() - mu;
    y.ln() + s + HALF_LN_2PI + z * z / (2.0 * (2.0 * s).exp())
}

/// Gradients and hessians of [`lognormal_nll`]:
/// (d/dmu, d/ds, d²/dmu², d²/ds² floored at 1e-6).
pub fn lognormal_nll_derivatives(y: f64, mu: f64, s: f64) -> (f64, f64, f64, f64) {
    let z = y.ln() - mu;
    let inv_var = (-2.0 * s).exp();
    (
        -z * inv_var,
        1.0 - z * z * inv_var,
        inv_var,
        (2.0 * z * z * inv_var).max(S_HESSIAN_FLOOR),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LssEnsemble {
    pub mu: GbtEnsemble,
    pub log_sigma: GbtEnsemble,
}

impl LssEnsemble {
    pub fn predict_params(&self, x: &[f64]) -> (f64, f64) {
        (self.mu.predict_row(x), self.log_sigma.predict_row(x))
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<FittedLognormal> {
        let (mu, s) = self.predict_params(x);
        FittedLognormal::new(mu, s.exp())
    }

    pub fn predict_distribution(&self, x: &FeatureTable) -> Result<Vec<FittedLognormal>> {
        check_width(self.mu.n_features, x)?;
        (0..x.rows).map(|i| self.predict_row(x.row(i))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LssFit {
    pub model: LssEnsemble,
    /// Mean training NLL at the base values and after each round.
    pub nll_trace: Vec<f64>,
}

/// Two-head lognormal boosting. Each round fits a mu tree, applies it, then
/// fits a log-sigma tree on the refreshed gradients.
pub fn lss_fit(x: &FeatureTable, y: &[f64], p: &BoostParams) -> Result<LssFit> {
    check_rows(x, y)?;
    p.validate()?;
    if let Some(bad) = y.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("lognormal targets must be > 0, got {bad}")));
    }
    let n = y.len();
    let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mu0 = logs.iter().sum::<f64>() / n as f64;
    let var = logs.iter().map(|l| (l - mu0) * (l - mu0)).sum::<f64>() / n as f64;
    let s0 = var.sqrt().max(1e-3).ln();
    let groups = RowGroups::new(x);
    let mut mu = vec![mu0; n];
    let mut s = vec![s0; n];
    let mean_nll = |mu: &[f64], s: &[f64]| (0..n).map(|i| lognormal_nll(y[i], mu[i], s[i])).sum::<f64>() / n as f64;
    let mut trace = vec![mean_nll(&mu, &s)];
    let (mut mu_trees, mut s_trees) = (Vec::new(), Vec::new());
    for round in 0..p.n_trees {
        let (g, h): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let d = lognormal_nll_derivatives(y[i], mu[i], s[i]);
                (d.0, d.2)
            })
            .unzip();
        let (t, out) = groups.fit(&g, &h, &p.tree)?;
        for (m, o) in mu.iter_mut().zip(&out) {
            *m += p.learning_rate * o;
        }
        mu_trees.push(t);

        let (g, h): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let d = lognormal_nll_derivatives(y[i], mu[i], s[i]);
                (d.1, d.3)
            })
            .unzip();
        let (t, out) = groups.fit(&g, &h, &p.tree)?;
        for (v, o) in s.iter_mut().zip(&out) {
            *v += p.learning_rate * o;
        }
        s_trees.push(t);

        let nll = mean_nll(&mu, &s);
        if !nll.is_finite() {
            return Err(Error::Divergence(format!(
                "training NLL not finite after round {}",
                round + 1
            )));
        }
        trace.push(nll);
    }
    let head = |base: f64, trees: Vec<RegressionTree>| GbtEnsemble {
        base_score: base,
        learning_rate: p.learning_rate,
        n_features: x.cols,
        trees,
    };
    Ok(LssFit {
        model: LssEnsemble {
            mu: head(mu0, mu_trees),
            log_sigma: head(s0, s_trees),
        },
        nll_trace: trace,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelCheckpoint {
    Gbt {
        version: u32,
        ensemble: GbtEnsemble,
    },
    Lss {
        version: u32,
        mu: GbtEnsemble,
        log_sigma: GbtEnsemble,
    },
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        let (version, heads) = match self {
            ModelCheckpoint::Gbt { version, ensemble } => (*version, vec![ensemble]),
            ModelCheckpoint::Lss { version, mu, log_sigma } => {
                if mu.n_features != log_sigma.n_features {
                    return Err(Error::Schema("heads disagree on feature width".into()));
                }
                (*version, vec![mu, log_sigma])
            }
        };
        if version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported model checkpoint version {version}")));
        }
        heads.into_iter().try_for_each(GbtEnsemble::validate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ingest::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = crate::ingest::read_json(path)?;
        ck.validate()?;
        Ok(ck)
    }
}

impl From<&LssEnsemble> for ModelCheckpoint {
    fn from(m: &LssEnsemble) -> Self {
        ModelCheckpoint::Lss {
            version: CHECKPOINT_VERSION,
            mu: m.mu.clone(),
            log_sigma: m.log_sigma.clone(),
        }
    }
}

impl From<&GbtEnsemble> for ModelCheckpoint {
    fn from(m: &GbtEnsemble) -> Self {
        ModelCheckpoint::Gbt {
            version: CHECKPOINT_VERSION,
            ensemble: m.clone(),
        }
    }
}

pub fn write_predictions_csv<W: Write>(writer: W, dists: &[FittedLognormal]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row_id", "mu", "sigma"])?;
    for (i, d) in dists.iter().enumerate() {
        w.write_record([i.to_string(), d.mu.to_string(), d.sigma.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::PredictiveDistribution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(rows: &[Vec<f64>]) -> FeatureTable {
        FeatureTable::from_rows(rows).unwrap()
    }

    /// Recursive exhaustive search straight from the split definition.
    fn oracle(
        x: &FeatureTable,
        g: &[f64],
        h: &[f64],
        rows: &[usize],
        depth: usize,
        p: &TreeParams,
    ) -> Vec<(usize, f64, usize)> {
        let (gt, ht): (f64, f64) = rows.iter().fold((0.0, 0.0), |a, &r| (a.0 + g[r], a.1 + h[r]));
        if depth == 0 {
            return vec![];
        }
        let mut best: Option<(f64, usize, f64)> = None;
        for j in 0..x.cols {
            let mut vals: Vec<f64> = rows.iter().map(|&r| x.get(r, j)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let t = w[0] + (w[1] - w[0]) / 2.0;
                let (mut gl, mut hl) = (0.0, 0.0);
                for &r in rows {
                    if x.get(r, j) < t {
                        gl += g[r];
                        hl += h[r];
                    }
                }
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < p.min_child_weight || hr < p.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (gl * gl / (hl + p.lambda) + gr * gr / (hr + p.lambda) - gt * gt / (ht + p.lambda));
                if gain > 0.0 && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, j, t));
                }
            }
        }
        match best {
            None => vec![],
            Some((_, j, t)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x.get(r, j) < t);
                let mut out = vec![(j, t, depth)];
                out.extend(oracle(x, g, h, &l, depth - 1, p));
                out.extend(oracle(x, g, h, &r, depth - 1, p));
                out
            }
        }
    }

    fn splits_preorder(t: &RegressionTree, i: usize, depth: usize, out: &mut Vec<(usize, f64, usize)>) {
        if let Node::Split {
            feature,
            threshold,
            left,
            right,
        } = t.nodes[i]
        {
            out.push((feature, threshold, depth));
            splits_preorder(t, left, depth - 1, out);
            splits_preorder(t, right, depth - 1, out);
        }
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..40 {
            let n = 8 + trial % 57;
            let cols = 1 + trial % 4;
            // integer grid values make sums exact, so gains compare exactly
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..cols).map(|_| rng.gen_range(0..12) as f64).collect())
                .collect();
            let x = table(&rows);
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-8..8) as f64).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.gen_range(1..4) as f64).collect();
            let p = TreeParams {
                max_depth: 1 + trial % 3,
                min_child_weight: 2.0,
                lambda: 1.0,
            };
            let tree = tree_fit(&x, &g, &h, &p).unwrap();
            let mut got = vec![];
            splits_preorder(&tree, 0, p.max_depth, &mut got);
            let want = oracle(&x, &g, &h, &(0..n).collect::<Vec<_>>(), p.max_depth, &p);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn step_function_splits_at_midpoint() {
        let xs = [-3.0, -1.0, -0.5, 0.5, 2.0, 4.0, -2.0, -1.5, 1.0, 3.0];
        let y: Vec<f64> = xs.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        let x = table(&xs.iter().map(|v| vec![*v]).collect::<Vec<_>>());
        let p = BoostParams {
            n_trees: 1,
            learning_rate: 1.0,
            tree: TreeParams {
                max_depth: 1,
                min_child_weight: 1.0,
                lambda: 0.0,
            },
        };
        let ens = gbt_fit(&x, &y, &p).unwrap();
        match ens.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_target_gives_single_leaf() {
        let x = table(&(0..20).map(|i| vec![i as f64]).collect::<Vec<_>>());
        let y = vec![3.5; 20];
        let ens = gbt_fit(
            &x,
            &y,
            &BoostParams {
                n_trees: 3,
                ..Default::default()
            },
        )
        .unwrap();
        for t in &ens.trees {
            assert_eq!(t.nodes, vec![Node::Leaf { value: 0.0 }]);
        }
        assert_eq!(ens.predict(&x).unwrap(), y);
        let none = gbt_fit(
            &x,
            &y,
            &BoostParams {
                n_trees: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(none.predict_row(&[100.0]), 3.5);
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.gen_range(0..20) as f64).collect())
            .collect();
        let g: Vec<f64> = (0..50).map(|_| rng.gen_range(-5..5) as f64).collect();
        let h = vec![1.0; 50];
        let mut perm: Vec<usize> = (0..50).collect();
        perm.reverse();
        perm.swap(3, 17);
        let xp = table(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        let p = TreeParams {
            max_depth: 3,
            min_child_weight: 2.0,
            lambda: 1.0,
        };
        assert_eq!(
            tree_fit(&table(&rows), &g, &h, &p).unwrap(),
            tree_fit(&xp, &gp, &h, &p).unwrap()
        );
    }

    #[test]
    fn gbt_descent_and_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 3.0 * r[0] + r[1] * r[2] + rng.gen_range(-0.1..0.1))
            .collect();
        let x = table(&rows);
        let (ens, trace) = gbt_fit_traced(
            &x,
            &y,
            &BoostParams {
                n_trees: 40,
                ..Default::default()
            },
        )
        .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        // structural oracle
        for r in &rows {
            let manual = ens.base_score + ens.learning_rate * ens.trees.iter().map(|t| t.predict(r)).sum::<f64>();
            assert_eq!(ens.predict_row(r), manual);
        }
        assert!(matches!(ens.predict(&table(&[vec![0.0; 3]])), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_split_target_fits_fast() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, i as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[1] >= 20.0 { 10.0 } else { -10.0 }).collect();
        let p = BoostParams {
            n_trees: 5,
            learning_rate: 1.0,
            tree: TreeParams {
                max_depth: 1,
                min_child_weight: 1.0,
                lambda: 1.0,
            },
        };
        let (_, trace) = gbt_fit_traced(&table(&rows), &y, &p).unwrap();
        assert!(*trace.last().unwrap() < 1e-3, "{trace:?}");
    }

    #[test]
    fn grouped_rows_match_ungrouped_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let proto: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.gen_range(0..9) as f64).collect())
            .collect();
        let rows: Vec<Vec<f64>> = (0..120).map(|i| proto[(i * 7) % 12].clone()).collect();
        let y: Vec<f64> = (0..120).map(|_| rng.gen_range(0..16) as f64).collect();
        let x = table(&rows);
        let p = BoostParams {
            n_trees: 1,
            learning_rate: 1.0,
            tree: TreeParams {
                max_depth: 3,
                min_child_weight: 5.0,
                lambda: 1.0,
            },
        };
        let ens = gbt_fit(&x, &y, &p).unwrap();
        let mean = y.iter().sum::<f64>() / 120.0;
        let g: Vec<f64> = y.iter().map(|v| mean - v).collect();
        let direct = tree_fit(&x, &g, &vec![1.0; 120], &p.tree).unwrap();
        for r in &rows {
            assert!((ens.trees[0].predict(r) - direct.predict(r)).abs() < 1e-9);
        }
        assert_eq!(ens.trees[0].n_leaves(), direct.n_leaves());
    }

    #[test]
    fn feature_scaling_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..2).map(|_| rng.gen_range(0..30) as f64).collect())
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] - 2.0 * r[1]).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| vec![2.0 * r[0], r[1]]).collect();
        let p = BoostParams {
            n_trees: 10,
            ..Default::default()
        };
        let a = gbt_fit(&table(&rows), &y, &p).unwrap();
        let b = gbt_fit(&table(&scaled), &y, &p).unwrap();
        for (r, s) in rows.iter().zip(&scaled) {
            assert_eq!(a.predict_row(r), b.predict_row(s));
        }
    }

    #[test]
    fn lognormal_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let y = rng.gen_range(1.0..3000.0);
            let mu = rng.gen_range(2.0..8.0);
            let s = rng.gen_range(-1.5..1.0);
            let (gm, gs, hm, hs) = lognormal_nll_derivatives(y, mu, s);
            let e = 1e-5;
            let fm = (lognormal_nll(y, mu + e, s) - lognormal_nll(y, mu - e, s)) / (2.0 * e);
            let fs = (lognormal_nll(y, mu, s + e) - lognormal_nll(y, mu, s - e)) / (2.0 * e);
            let hmn =
                (lognormal_nll_derivatives(y, mu + e, s).0 - lognormal_nll_derivatives(y, mu - e, s).0) / (2.0 * e);
            let hsn =
                (lognormal_nll_derivatives(y, mu, s + e).1 - lognormal_nll_derivatives(y, mu, s - e).1) / (2.0 * e);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel(gm, fm) < 1e-6 && rel(gs, fs) < 1e-6, "{y} {mu} {s}");
            assert!(rel(hm, hmn) < 1e-6);
            if hs > S_HESSIAN_FLOOR {
                assert!(rel(hs, hsn) < 1e-6);
            }
        }
        let y = 150.0f64;
        assert_eq!(lognormal_nll_derivatives(y, y.ln(), 0.3).0, 0.0);
    }

    fn lognormal_rows(seed: u64, n: usize, hetero: bool) -> (FeatureTable, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut mus = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.gen_range(0.0..1.0);
            let b: f64 = rng.gen_range(0.0..1.0);
            let mu = 5.0 + if hetero { 1.2 * (a - 0.5) } else { 0.0 };
            let sigma = 0.6;
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            rows.push(vec![a, b]);
            y.push((mu + sigma * z).exp());
            mus.push(mu);
        }
        (table(&rows), y, mus)
    }

    #[test]
    fn lss_recovers_location_and_descends() {
        let (x, y, mus) = lognormal_rows(2, 1500, true);
        let fit = lss_fit(
            &x,
            &y,
            &BoostParams {
                n_trees: 60,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 5..fit.nll_trace.len() {
            assert!(fit.nll_trace[i] <= fit.nll_trace[i - 5] + 1e-12);
        }
        let pred: Vec<f64> = (0..x.rows).map(|i| fit.model.predict_params(x.row(i)).0).collect();
        let r = pearson(&pred, &mus);
        assert!(r > 0.9, "{r}");
        let d = fit.model.predict_row(x.row(0)).unwrap();
        assert!((d.median() - d.mu.exp()).abs() < 1e-9 * d.median());
    }

    #[test]
    fn lss_homoscedastic_sigma_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // the s head tracks per-group sample spread, so each feature vector
        // needs enough draws for that noise to sit below the bound
        let (cells, per, dim) = (100, 250, 8);
        let feats: Vec<Vec<f64>> = (0..cells)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut rows = vec![];
        let mut y = vec![];
        for f in &feats {
            for _ in 0..per {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                rows.push(f.clone());
                y.push((5.0 + 0.6 * z).exp());
            }
        }
        let x = table(&rows);
        let fit = lss_fit(&x, &y, &BoostParams::default()).unwrap();
        let sig: Vec<f64> = (0..x.rows)
            .map(|i| fit.model.predict_params(x.row(i)).1.exp())
            .collect();
        let mean = sig.iter().sum::<f64>() / sig.len() as f64;
        let sd = (sig.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sig.len() as f64).sqrt();
        assert!(sd / mean < 0.05, "spread {}", sd / mean);
    }

    #[test]
    fn lss_rejects_bad_targets() {
        let (x, mut y, _) = lognormal_rows(4, 20, false);
        y[3] = 0.0;
        assert!(matches!(
            lss_fit(&x, &y, &BoostParams::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (x, y, _) = lognormal_rows(6, 100, true);
        let fit = lss_fit(
            &x,
            &y,
            &BoostParams {
                n_trees: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let ck = ModelCheckpoint::from(&fit.model);
        let back: ModelCheckpoint = serde_json::from_str(&serde_json::to_string(&ck).unwrap()).unwrap();
        back.validate().unwrap();
        assert_eq!(back, ck);
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &fit.model.predict_distribution(&x).unwrap()).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("row_id,mu,sigma\n0,"));
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }
}
