//! Hexagonal convolutional autoencoder over neighbourhood tag-count patches.
//!
//! Network, per patch of P = 3R(R+1)+1 positions and T tags:
//!
//! ```text
//! x (P×T) -> hexconv(T->C), tanh -> flatten (P·C) -> dense H, tanh -> dense E (embedding)
//!         -> dense H, tanh -> dense P·C, tanh -> hexconv(C->2T) -> (logit_pi, log_lambda) per (p, t)
//! ```
//!
//! A hex convolution has kernel radius 1 with two weight matrices: one for the
//! position itself and one shared by its six neighbours that fall in the patch.
//! All parameters live in one flat vector; [`Layout`] gives the offsets.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{disk_size, Axial, HexCellId, DIRECTIONS};
use crate::ingest::RegionFeatureMatrix;
use crate::special::ln_factorial;

pub const EMBEDDING_DIM: usize = 50;
pub const DEFAULT_RADIUS: u32 = 3;

const LOGIT_CLAMP: f64 = 30.0;
const LOG_LAMBDA_CLAMP: f64 = 20.0;

/// A cell's neighbourhood in spiral order. `counts` holds raw counts,
/// row-major P×T; absent neighbours are zero with `mask[p] = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPatch {
    pub center: HexCellId,
    pub radius: u32,
    pub n_tags: usize,
    pub counts: Vec<f64>,
    pub mask: Vec<bool>,
    /// Encoder sees ln(1 + count) instead of the raw count.
    pub log1p_input: bool,
}

impl HexPatch {
    pub fn positions(&self) -> usize {
        self.mask.len()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.counts[p * self.n_tags..(p + 1) * self.n_tags]
    }

    /// Value fed to the encoder for entry (p, t).
    fn input(&self, i: usize) -> f64 {
        let c = self.counts[i];
        if self.log1p_input {
            c.ln_1p()
        } else {
            c
        }
    }

    fn input_slope(&self, i: usize) -> f64 {
        if self.log1p_input {
            1.0 / (1.0 + self.counts[i])
        } else {
            1.0
        }
    }

    /// The same patch rotated one step clockwise: every ring shifts by its radius.
    pub fn rotated(&self) -> HexPatch {
        let mut out = self.clone();
        for (old, new) in rotation_permutation(self.radius).into_iter().enumerate() {
            out.mask[new] = self.mask[old];
            out.counts[new * self.n_tags..(new + 1) * self.n_tags].copy_from_slice(self.row(old));
        }
        out
    }
}

/// `perm[i]` is where spiral position `i` lands after a one-step clockwise rotation.
pub fn rotation_permutation(radius: u32) -> Vec<usize> {
    let mut perm = vec![0];
    let mut start = 1;
    for k in 1..=radius as usize {
        let len = 6 * k;
        perm.extend((0..len).map(|i| start + (i + k) % len));
        start += len;
    }
    perm
}

pub fn build_patch(cell: &HexCellId, m: &RegionFeatureMatrix, radius: u32, log1p_input: bool) -> Result<HexPatch> {
    if *cell.city_id != *m.city_id {
        return Err(Error::CityMismatch(cell.city_id.to_string(), m.city_id.clone()));
    }
    let t = m.width();
    let offsets = Axial::ORIGIN.spiral(radius);
    let mut counts = vec![0.0; offsets.len() * t];
    let mut mask = vec![false; offsets.len()];
    for (p, off) in offsets.iter().enumerate() {
        let a = Axial::new(cell.axial.q + off.q, cell.axial.r + off.r);
        if let Some(row) = m.row_of(a) {
            mask[p] = true;
            for (dst, &src) in counts[p * t..(p + 1) * t].iter_mut().zip(row) {
                *dst = src as f64;
            }
        }
    }
    Ok(HexPatch {
        center: cell.clone(),
        radius,
        n_tags: t,
        counts,
        mask,
        log1p_input,
    })
}

/// One patch per row of `m`, in row order.
pub fn build_patches(m: &RegionFeatureMatrix, radius: u32, log1p_input: bool) -> Vec<HexPatch> {
    let city: std::sync::Arc<str> = m.city_id.as_str().into();
    m.cells()
        .iter()
        .map(|&axial| {
            let id = HexCellId {
                city_id: city.clone(),
                axial,
            };
            build_patch(&id, m, radius, log1p_input).expect("cell belongs to the matrix city")
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zero-inflated Poisson negative log-likelihood of count `x`.
pub fn zip_nll(logit_pi: f64, log_lambda: f64, x: u64) -> f64 {
    zip_nll_grad(logit_pi, log_lambda, x).0
}

/// NLL and its partials with respect to `logit_pi` and `log_lambda`.
/// Inputs are clamped; partials vanish outside the clamp.
pub fn zip_nll_grad(logit_pi: f64, log_lambda: f64, x: u64) -> (f64, f64, f64) {
    let a = logit_pi.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let l = log_lambda.clamp(-LOG_LAMBDA_CLAMP, LOG_LAMBDA_CLAMP);
    let a_in = if a == logit_pi { 1.0 } else { 0.0 };
    let l_in = if l == log_lambda { 1.0 } else { 0.0 };
    let lambda = l.exp();
    let pi = sigmoid(a);
    if x == 0 {
        // ln(pi + (1 - pi) e^-lambda) as a log-sum-exp
        let la = -softplus(-a);
        let lb = -softplus(a) - lambda;
        let hi = la.max(lb);
        let lse = hi + ((la - hi).exp() + (lb - hi).exp()).ln();
        let wa = (la - lse).exp();
        let wb = (lb - lse).exp();
        let da = -(wa * (1.0 - pi) - wb * pi);
        let dl = wb * lambda;
        (-lse, da * a_in, dl * l_in)
    } else {
        let xf = x as f64;
        let nll = softplus(a) - xf * l + lambda + ln_factorial(x);
        (nll, pi * a_in, (lambda - xf) * l_in)
    }
}

/// Ring-distance weight 1/(1+d), normalised so the patch total is 1.
pub fn location_weight(d: u32, radius: u32) -> f64 {
    assert!(d <= radius, "ring {d} outside patch radius {radius}");
    let total: f64 = (0..=radius).map(|k| ring_len(k) as f64 / (1.0 + k as f64)).sum();
    1.0 / (1.0 + d as f64) / total
}

fn ring_len(k: u32) -> usize {
    if k == 0 {
        1
    } else {
        6 * k as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub radius: u32,
    pub n_tags: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl EmbedConfig {
    pub fn new(n_tags: usize) -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            n_tags,
            conv_channels: 16,
            hidden: 128,
            embedding_dim: EMBEDDING_DIM,
        }
    }

    pub fn positions(&self) -> usize {
        disk_size(self.radius)
    }

    fn validate(&self) -> Result<()> {
        if self.n_tags == 0 || self.conv_channels == 0 || self.hidden == 0 || self.embedding_dim == 0 {
            return Err(Error::Config(format!(
                "embedding layer sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    cfg: EmbedConfig,
    // encoder
    c_self: usize,
    c_nb: usize,
    c_b: usize,
    d1_w: usize,
    d1_b: usize,
    e_w: usize,
    e_b: usize,
    // decoder
    d3_w: usize,
    d3_b: usize,
    d4_w: usize,
    d4_b: usize,
    o_self: usize,
    o_nb: usize,
    o_b: usize,
    total: usize,
}

impl Layout {
    pub fn new(cfg: EmbedConfig) -> Self {
        let (t, c, h, e, p) = (
            cfg.n_tags,
            cfg.conv_channels,
            cfg.hidden,
            cfg.embedding_dim,
            cfg.positions(),
        );
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let c_self = take(c * t);
        let c_nb = take(c * t);
        let c_b = take(c);
        let d1_w = take(h * p * c);
        let d1_b = take(h);
        let e_w = take(e * h);
        let e_b = take(e);
        let d3_w = take(h * e);
        let d3_b = take(h);
        let d4_w = take(p * c * h);
        let d4_b = take(p * c);
        let o_self = take(2 * t * c);
        let o_nb = take(2 * t * c);
        let o_b = take(2 * t);
        Self {
            cfg,
            c_self,
            c_nb,
            c_b,
            d1_w,
            d1_b,
            e_w,
            e_b,
            d3_w,
            d3_b,
            d4_w,
            d4_b,
            o_self,
            o_nb,
            o_b,
            total: at,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Named blocks with (offset, rows, cols), in storage order.
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let EmbedConfig {
            n_tags: t,
            conv_channels: c,
            hidden: h,
            embedding_dim: e,
            ..
        } = self.cfg;
        let p = self.cfg.positions();
        vec![
            ("enc_conv_self", self.c_self, c, t),
            ("enc_conv_neighbor", self.c_nb, c, t),
            ("enc_conv_bias", self.c_b, c, 1),
            ("enc_dense_w", self.d1_w, h, p * c),
            ("enc_dense_b", self.d1_b, h, 1),
            ("bottleneck_w", self.e_w, e, h),
            ("bottleneck_b", self.e_b, e, 1),
            ("dec_dense_w", self.d3_w, h, e),
            ("dec_dense_b", self.d3_b, h, 1),
            ("dec_expand_w", self.d4_w, p * c, h),
            ("dec_expand_b", self.d4_b, p * c, 1),
            ("dec_conv_self", self.o_self, 2 * t, c),
            ("dec_conv_neighbor", self.o_nb, 2 * t, c),
            ("dec_conv_bias", self.o_b, 2 * t, 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EmbedConfig,
    pub values: Vec<f64>,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: EmbedConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.len()];
        for (name, off, rows, cols) in layout.blocks() {
            if name.ends_with("bias") || name.ends_with("_b") {
                continue;
            }
            // conv fan-in counts the centre plus six neighbours
            let fan_in = if name.contains("conv") { 7 * cols } else { cols };
            let limit = (6.0 / (fan_in + rows) as f64).sqrt();
            for v in &mut values[off..off + rows * cols] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self { config, values })
    }

    /// Like [`init`](Self::init), with the reconstruction biases set to a
    /// moment-matched zero-inflated Poisson per tag over the unmasked
    /// positions of `patches`.
    pub fn init_for(config: EmbedConfig, seed: u64, patches: &[HexPatch]) -> Result<Self> {
        let mut params = Self::init(config, seed)?;
        let t = config.n_tags;
        let (mut sum, mut zeros, mut n) = (vec![0.0; t], vec![0.0; t], 0usize);
        for p in patches {
            params.check_patch(p)?;
            for pos in (0..p.positions()).filter(|&pos| p.mask[pos]) {
                n += 1;
                for (j, &c) in p.row(pos).iter().enumerate() {
                    sum[j] += c;
                    if c == 0.0 {
                        zeros[j] += 1.0;
                    }
                }
            }
        }
        if n == 0 {
            return Ok(params);
        }
        let ob = params.layout().o_b;
        for j in 0..t {
            let mean = (sum[j] / n as f64).max(1e-3);
            let zero = zeros[j] / n as f64;
            let poisson_zero = (-mean).exp();
            let pi = ((zero - poisson_zero) / (1.0 - poisson_zero)).clamp(0.01, 0.99);
            params.values[ob + j] = (pi / (1.0 - pi)).ln();
            params.values[ob + t + j] = (mean / (1.0 - pi)).ln();
        }
        Ok(params)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.config)
    }

    fn check_patch(&self, patch: &HexPatch) -> Result<()> {
        if patch.radius != self.config.radius {
            return Err(Error::Shape {
                expected: self.config.radius as usize,
                actual: patch.radius as usize,
            });
        }
        if patch.n_tags != self.config.n_tags {
            return Err(Error::Shape {
                expected: self.config.n_tags,
                actual: patch.n_tags,
            });
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let layout = self.layout();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            shapes: layout
                .blocks()
                .into_iter()
                .map(|(name, _, rows, cols)| BlockShape {
                    name: name.into(),
                    rows,
                    cols,
                })
                .collect(),
            values: self.values.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        let layout = Layout::new(ck.config);
        let expected: Vec<(String, usize, usize)> = layout
            .blocks()
            .into_iter()
            .map(|(n, _, r, c)| (n.to_string(), r, c))
            .collect();
        let got: Vec<(String, usize, usize)> = ck.shapes.iter().map(|s| (s.name.clone(), s.rows, s.cols)).collect();
        if expected != got {
            return Err(Error::Schema("checkpoint block shapes do not match its config".into()));
        }
        if ck.values.len() != layout.len() {
            return Err(Error::Shape {
                expected: layout.len(),
                actual: ck.values.len(),
            });
        }
        if ck.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("checkpoint holds non-finite parameters".into()));
        }
        Ok(Self {
            config: ck.config,
            values: ck.values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ingest::write_json(path, &self.checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(crate::ingest::read_json(path)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "urbanctx-hexconv-autoencoder";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: header with config and block shapes, then the flat values
/// in block order (each block row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: EmbedConfig,
    pub shapes: Vec<BlockShape>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// In-patch neighbour lists for spiral positions.
fn neighbor_table(radius: u32) -> Vec<Vec<usize>> {
    let offsets = Axial::ORIGIN.spiral(radius);
    let index: std::collections::HashMap<Axial, usize> = offsets.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    offsets
        .iter()
        .map(|a| {
            DIRECTIONS
                .iter()
                .filter_map(|d| index.get(&Axial::new(a.q + d.q, a.r + d.r)).copied())
                .collect()
        })
        .collect()
}

fn ring_of_positions(radius: u32) -> Vec<u32> {
    (0..=radius).flat_map(|k| std::iter::repeat_n(k, ring_len(k))).collect()
}

// y += W x, W row-major (rows × x.len())
fn gemv_add(w: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(n)) {
        *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

// x += Wᵀ g
fn gemv_t_add(w: &[f64], g: &[f64], x: &mut [f64]) {
    let n = x.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(n)) {
        if *gi != 0.0 {
            for (xj, wj) in x.iter_mut().zip(row) {
                *xj += gi * wj;
            }
        }
    }
}

// dW += g ⊗ x
fn outer_add(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(n)) {
        if *gi != 0.0 {
            for (d, xj) in row.iter_mut().zip(x) {
                *d += gi * xj;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Tape {
    x: Vec<f64>,
    xs: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    emb: Vec<f64>,
    h3: Vec<f64>,
    h4: Vec<f64>,
    h4s: Vec<f64>,
    out: Vec<f64>,
}

/// Reusable network evaluator for a fixed configuration.
pub struct Network {
    cfg: EmbedConfig,
    layout: Layout,
    nb: Vec<Vec<usize>>,
    weight: Vec<f64>,
}

pub struct ForwardOutput {
    pub embedding: Vec<f64>,
    /// Row-major P×2T: the first T columns are logit_pi, the rest log_lambda.
    pub recon: Vec<f64>,
    pub loss: f64,
}

impl Network {
    pub fn new(cfg: EmbedConfig) -> Self {
        let rings = ring_of_positions(cfg.radius);
        Self {
            cfg,
            layout: Layout::new(cfg),
            nb: neighbor_table(cfg.radius),
            weight: rings.iter().map(|&d| location_weight(d, cfg.radius)).collect(),
        }
    }

    // neighbour sum of a P×n field
    fn neighbor_sum(&self, field: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; field.len()];
        for (p, nbs) in self.nb.iter().enumerate() {
            let dst = &mut out[p * n..(p + 1) * n];
            for &q in nbs {
                for (d, s) in dst.iter_mut().zip(&field[q * n..(q + 1) * n]) {
                    *d += s;
                }
            }
        }
        out
    }

    fn encode(&self, v: &[f64], patch: &HexPatch) -> Tape {
        let ly = &self.layout;
        let EmbedConfig {
            n_tags: t,
            conv_channels: c,
            hidden: h,
            embedding_dim: e,
            ..
        } = self.cfg;
        let p = self.cfg.positions();
        let mut x = vec![0.0; p * t];
        for pos in 0..p {
            if patch.mask[pos] {
                for j in 0..t {
                    x[pos * t + j] = patch.input(pos * t + j);
                }
            }
        }
        let xs = self.neighbor_sum(&x, t);
        let mut h1 = vec![0.0; p * c];
        for pos in 0..p {
            let z = &mut h1[pos * c..(pos + 1) * c];
            z.copy_from_slice(&v[ly.c_b..ly.c_b + c]);
            gemv_add(&v[ly.c_self..ly.c_self + c * t], &x[pos * t..(pos + 1) * t], z);
            gemv_add(&v[ly.c_nb..ly.c_nb + c * t], &xs[pos * t..(pos + 1) * t], z);
        }
        h1.iter_mut().for_each(|z| *z = z.tanh());
        let mut h2 = v[ly.d1_b..ly.d1_b + h].to_vec();
        gemv_add(&v[ly.d1_w..ly.d1_w + h * p * c], &h1, &mut h2);
        h2.iter_mut().for_each(|z| *z = z.tanh());
        let mut emb = v[ly.e_b..ly.e_b + e].to_vec();
        gemv_add(&v[ly.e_w..ly.e_w + e * h], &h2, &mut emb);
        Tape {
            x,
            xs,
            h1,
            h2,
            emb,
            h3: vec![],
            h4: vec![],
            h4s: vec![],
            out: vec![],
        }
    }

    fn decode(&self, v: &[f64], tape: &mut Tape) {
        let ly = &self.layout;
        let EmbedConfig {
            n_tags: t,
            conv_channels: c,
            hidden: h,
            embedding_dim: e,
            ..
        } = self.cfg;
        let p = self.cfg.positions();
        let mut h3 = v[ly.d3_b..ly.d3_b + h].to_vec();
        gemv_add(&v[ly.d3_w..ly.d3_w + h * e], &tape.emb, &mut h3);
        h3.iter_mut().for_each(|z| *z = z.tanh());
        let mut h4 = v[ly.d4_b..ly.d4_b + p * c].to_vec();
        gemv_add(&v[ly.d4_w..ly.d4_w + p * c * h], &h3, &mut h4);
        h4.iter_mut().for_each(|z| *z = z.tanh());
        let h4s = self.neighbor_sum(&h4, c);
        let mut out = vec![0.0; p * 2 * t];
        for pos in 0..p {
            let z = &mut out[pos * 2 * t..(pos + 1) * 2 * t];
            z.copy_from_slice(&v[ly.o_b..ly.o_b + 2 * t]);
            gemv_add(&v[ly.o_self..ly.o_self + 2 * t * c], &h4[pos * c..(pos + 1) * c], z);
            gemv_add(&v[ly.o_nb..ly.o_nb + 2 * t * c], &h4s[pos * c..(pos + 1) * c], z);
        }
        tape.h3 = h3;
        tape.h4 = h4;
        tape.h4s = h4s;
        tape.out = out;
    }

    /// Loss and its gradient with respect to the decoder outputs.
    fn loss(&self, patch: &HexPatch, out: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let t = self.cfg.n_tags;
        let mut g = if want_grad { vec![0.0; out.len()] } else { vec![] };
        let mut loss = 0.0;
        for pos in 0..self.cfg.positions() {
            if !patch.mask[pos] {
                continue;
            }
            let w = self.weight[pos];
            let o = &out[pos * 2 * t..(pos + 1) * 2 * t];
            for j in 0..t {
                let x = patch.counts[pos * t + j] as u64;
                let (nll, da, dl) = zip_nll_grad(o[j], o[t + j], x);
                loss += w * nll;
                if want_grad {
                    g[pos * 2 * t + j] = w * da;
                    g[pos * 2 * t + t + j] = w * dl;
                }
            }
        }
        (loss, g)
    }

    pub fn embed(&self, params: &EncoderParams, patch: &HexPatch) -> Result<Vec<f64>> {
        params.check_patch(patch)?;
        Ok(self.encode(&params.values, patch).emb)
    }

    pub fn forward(&self, params: &EncoderParams, patch: &HexPatch) -> Result<ForwardOutput> {
        params.check_patch(patch)?;
        let mut tape = self.encode(&params.values, patch);
        self.decode(&params.values, &mut tape);
        let (loss, _) = self.loss(patch, &tape.out, false);
        Ok(ForwardOutput {
            embedding: tape.emb,
            recon: tape.out,
            loss,
        })
    }

    /// Loss, gradient with respect to every parameter (added into `grad`),
    /// and gradient with respect to the patch counts when `input_grad` is set.
    fn backward(&self, v: &[f64], patch: &HexPatch, grad: &mut [f64], input_grad: bool) -> (f64, Option<Vec<f64>>) {
        let ly = &self.layout;
        let EmbedConfig {
            n_tags: t,
            conv_channels: c,
            hidden: h,
            embedding_dim: e,
            ..
        } = self.cfg;
        let p = self.cfg.positions();
        let mut tape = self.encode(v, patch);
        self.decode(v, &mut tape);
        let (loss, g_out) = self.loss(patch, &tape.out, true);

        // output hex conv
        let g_out_s = self.neighbor_sum(&g_out, 2 * t);
        let mut g_h4 = vec![0.0; p * c];
        for pos in 0..p {
            let go = &g_out[pos * 2 * t..(pos + 1) * 2 * t];
            outer_add(
                &mut grad[ly.o_self..ly.o_self + 2 * t * c],
                go,
                &tape.h4[pos * c..(pos + 1) * c],
            );
            outer_add(
                &mut grad[ly.o_nb..ly.o_nb + 2 * t * c],
                go,
                &tape.h4s[pos * c..(pos + 1) * c],
            );
            for (d, g) in grad[ly.o_b..ly.o_b + 2 * t].iter_mut().zip(go) {
                *d += g;
            }
            let gh = &mut g_h4[pos * c..(pos + 1) * c];
            gemv_t_add(&v[ly.o_self..ly.o_self + 2 * t * c], go, gh);
            gemv_t_add(
                &v[ly.o_nb..ly.o_nb + 2 * t * c],
                &g_out_s[pos * 2 * t..(pos + 1) * 2 * t],
                gh,
            );
        }
        // expand layer
        let g_z4: Vec<f64> = g_h4.iter().zip(&tape.h4).map(|(g, a)| g * (1.0 - a * a)).collect();
        outer_add(&mut grad[ly.d4_w..ly.d4_w + p * c * h], &g_z4, &tape.h3);
        add_into(&mut grad[ly.d4_b..ly.d4_b + p * c], &g_z4);
        let mut g_h3 = vec![0.0; h];
        gemv_t_add(&v[ly.d4_w..ly.d4_w + p * c * h], &g_z4, &mut g_h3);
        // decoder dense
        let g_z3: Vec<f64> = g_h3.iter().zip(&tape.h3).map(|(g, a)| g * (1.0 - a * a)).collect();
        outer_add(&mut grad[ly.d3_w..ly.d3_w + h * e], &g_z3, &tape.emb);
        add_into(&mut grad[ly.d3_b..ly.d3_b + h], &g_z3);
        let mut g_emb = vec![0.0; e];
        gemv_t_add(&v[ly.d3_w..ly.d3_w + h * e], &g_z3, &mut g_emb);
        // bottleneck (linear)
        outer_add(&mut grad[ly.e_w..ly.e_w + e * h], &g_emb, &tape.h2);
        add_into(&mut grad[ly.e_b..ly.e_b + e], &g_emb);
        let mut g_h2 = vec![0.0; h];
        gemv_t_add(&v[ly.e_w..ly.e_w + e * h], &g_emb, &mut g_h2);
        // encoder dense
        let g_z2: Vec<f64> = g_h2.iter().zip(&tape.h2).map(|(g, a)| g * (1.0 - a * a)).collect();
        outer_add(&mut grad[ly.d1_w..ly.d1_w + h * p * c], &g_z2, &tape.h1);
        add_into(&mut grad[ly.d1_b..ly.d1_b + h], &g_z2);
        let mut g_h1 = vec![0.0; p * c];
        gemv_t_add(&v[ly.d1_w..ly.d1_w + h * p * c], &g_z2, &mut g_h1);
        // input hex conv
        let g_z1: Vec<f64> = g_h1.iter().zip(&tape.h1).map(|(g, a)| g * (1.0 - a * a)).collect();
        for pos in 0..p {
            let gz = &g_z1[pos * c..(pos + 1) * c];
            outer_add(
                &mut grad[ly.c_self..ly.c_self + c * t],
                gz,
                &tape.x[pos * t..(pos + 1) * t],
            );
            outer_add(
                &mut grad[ly.c_nb..ly.c_nb + c * t],
                gz,
                &tape.xs[pos * t..(pos + 1) * t],
            );
            add_into(&mut grad[ly.c_b..ly.c_b + c], gz);
        }
        let g_in = input_grad.then(|| {
            let g_z1_s = self.neighbor_sum(&g_z1, c);
            let mut g_x = vec![0.0; p * t];
            for pos in 0..p {
                if !patch.mask[pos] {
                    continue;
                }
                let gx = &mut g_x[pos * t..(pos + 1) * t];
                gemv_t_add(&v[ly.c_self..ly.c_self + c * t], &g_z1[pos * c..(pos + 1) * c], gx);
                gemv_t_add(&v[ly.c_nb..ly.c_nb + c * t], &g_z1_s[pos * c..(pos + 1) * c], gx);
                for (j, g) in gx.iter_mut().enumerate() {
                    *g *= patch.input_slope(pos * t + j);
                }
            }
            g_x
        });
        (loss, g_in)
    }

    /// Loss and full parameter gradient for one patch.
    pub fn loss_and_grad(&self, params: &EncoderParams, patch: &HexPatch) -> Result<(f64, Vec<f64>)> {
        params.check_patch(patch)?;
        let mut grad = vec![0.0; self.layout.len()];
        let (loss, _) = self.backward(&params.values, patch, &mut grad, false);
        Ok((loss, grad))
    }

    /// Gradient of the loss with respect to the encoder inputs through the
    /// encoder path only (the reconstruction targets are held fixed).
    pub fn input_gradient(&self, params: &EncoderParams, patch: &HexPatch) -> Result<Vec<f64>> {
        params.check_patch(patch)?;
        let mut grad = vec![0.0; self.layout.len()];
        Ok(self
            .backward(&params.values, patch, &mut grad, true)
            .1
            .expect("requested"))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn forward(params: &EncoderParams, patch: &HexPatch) -> Result<ForwardOutput> {
    Network::new(params.config).forward(params, patch)
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences over every parameter. Relative error uses
/// max(|analytic|, |numeric|, 1e-6) as denominator.
pub fn grad_check(params: &EncoderParams, patch: &HexPatch, eps: f64) -> Result<f64> {
    let net = Network::new(params.config);
    let (_, analytic) = net.loss_and_grad(params, patch)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let up = net.forward(&probe, patch)?.loss;
        probe.values[i] = orig - eps;
        let down = net.forward(&probe, patch)?.loss;
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    /// Rescale each batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr: 1e-3,
            momentum: 0.9,
            batch: 32,
            seed,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean per-patch loss at initialisation, then the mean batch loss of each epoch.
    pub loss_curve: Vec<f64>,
}

const MIN_TRAIN_PATCHES: usize = 32;
const GRAD_CHUNK: usize = 4;

fn mean_loss(net: &Network, params: &EncoderParams, patches: &[HexPatch]) -> f64 {
    let total: f64 = patches
        .par_iter()
        .map(|p| net.forward(params, p).map(|o| o.loss).unwrap_or(f64::NAN))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / patches.len() as f64
}

/// Mini-batch SGD with momentum. Batch gradients are averaged; per-sample
/// gradients are computed in parallel and summed in batch order.
pub fn train(params: &EncoderParams, patches: &[HexPatch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if patches.len() < MIN_TRAIN_PATCHES {
        return Err(Error::InsufficientData(format!(
            "embedding training needs >= {MIN_TRAIN_PATCHES} patches, got {}",
            patches.len()
        )));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config(format!("invalid training settings {cfg:?}")));
    }
    for p in patches {
        params.check_patch(p)?;
    }
    let net = Network::new(params.config);
    let mut params = params.clone();
    let mut velocity = vec![0.0; params.values.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let initial = mean_loss(&net, &params, patches);
    if !initial.is_finite() {
        return Err(Error::Divergence("initial embedding loss is not finite".into()));
    }
    curve.push(initial);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            // fixed partition of the batch, summed in order: thread-count independent
            let partials: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; params.values.len()];
                    let mut loss = 0.0;
                    for &i in chunk {
                        loss += net.backward(&params.values, &patches[i], &mut g, false).0;
                    }
                    (loss, g)
                })
                .collect();
            let mut grad = vec![0.0; params.values.len()];
            for (loss, g) in &partials {
                epoch_loss += loss;
                add_into(&mut grad, g);
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(max) = cfg.clip_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt() * scale;
                if norm > max {
                    scale *= max / norm;
                }
            }
            for ((v, vel), g) in params.values.iter_mut().zip(&mut velocity).zip(&grad) {
                *vel = cfg.momentum * *vel - cfg.lr * g * scale;
                *v += *vel;
            }
        }
        let loss = epoch_loss / patches.len() as f64;
        if !loss.is_finite() || params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "embedding loss diverged at epoch {}",
                epoch + 1
            )));
        }
        curve.push(loss);
    }
    Ok(TrainOutcome {
        params,
        loss_curve: curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub city_id: String,
    pub cells: Vec<Axial>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self) -> std::collections::HashMap<Axial, usize> {
        self.cells.iter().enumerate().map(|(i, c)| (*c, i)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cell_q".to_string(), "cell_r".to_string()];
        header.extend((0..self.dim).map(|j| format!("e{j}")));
        w.write_record(&header)?;
        for (i, c) in self.cells.iter().enumerate() {
            let mut rec = vec![c.q.to_string(), c.r.to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R, city_id: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "cell_q" || &header[1] != "cell_r" {
            return Err(Error::Schema("embedding CSV must start with cell_q,cell_r".into()));
        }
        let dim = header.len() - 2;
        for (j, name) in header.iter().skip(2).enumerate() {
            if name != format!("e{j}") {
                return Err(Error::Schema(format!("unexpected embedding column {name:?}")));
            }
        }
        let mut cells = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Schema(format!("embedding row {}: bad {what}", i + 1));
            cells.push(Axial::new(
                rec[0].parse().map_err(|_| bad("cell_q"))?,
                rec[1].parse().map_err(|_| bad("cell_r"))?,
            ));
            for f in rec.iter().skip(2) {
                let v: f64 = f.parse().map_err(|_| bad("value"))?;
                if !v.is_finite() {
                    return Err(bad("value"));
                }
                values.push(v);
            }
        }
        Ok(Self {
            city_id: city_id.to_string(),
            cells,
            dim,
            values,
        })
    }
}

/// Embeds every cell of `m`.
pub fn embed_matrix(params: &EncoderParams, m: &RegionFeatureMatrix, log1p_input: bool) -> Result<EmbeddingMatrix> {
    let net = Network::new(params.config);
    let patches = build_patches(m, params.config.radius, log1p_input);
    let rows: Vec<Vec<f64>> = patches
        .par_iter()
        .map(|p| net.embed(params, p))
        .collect::<Result<_>>()?;
    Ok(EmbeddingMatrix {
        city_id: m.city_id.clone(),
        cells: m.cells().to_vec(),
        dim: params.config.embedding_dim,
        values: rows.concat(),
    })
}

/// Patches with log1p inputs, bias-matched init, training, then embedding of
/// every cell.
pub fn fit_embeddings(
    m: &RegionFeatureMatrix,
    config: EmbedConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainOutcome, EmbeddingMatrix)> {
    let patches = build_patches(m, config.radius, true);
    let init = EncoderParams::init_for(config, train_cfg.seed, &patches)?;
    let outcome = train(&init, &patches, train_cfg)?;
    let emb = embed_matrix(&outcome.params, m, true)?;
    Ok((outcome, emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{synth_city, SynthConfig, TagVocabulary};
    use std::sync::Arc;

    fn tiny_cfg(t: usize, radius: u32) -> EmbedConfig {
        EmbedConfig {
            radius,
            n_tags: t,
            conv_channels: 3,
            hidden: 8,
            embedding_dim: 5,
        }
    }

    fn random_patch(cfg: &EmbedConfig, rng: &mut ChaCha8Rng) -> HexPatch {
        let p = cfg.positions();
        let mask: Vec<bool> = (0..p).map(|i| i == 0 || rng.gen_bool(0.8)).collect();
        let counts = (0..p * cfg.n_tags)
            .map(|i| {
                if mask[i / cfg.n_tags] && rng.gen_bool(0.6) {
                    rng.gen_range(0..6) as f64
                } else {
                    0.0
                }
            })
            .collect();
        HexPatch {
            center: HexCellId {
                city_id: "t".into(),
                axial: Axial::ORIGIN,
            },
            radius: cfg.radius,
            n_tags: cfg.n_tags,
            counts,
            mask,
            log1p_input: true,
        }
    }

    #[test]
    fn zip_examples() {
        assert!((zip_nll(-1e9, 0.0, 0) - 1.0).abs() < 1e-12);
        assert!(zip_nll(20.0, 0.0, 0) < 1e-8);
        // direct pmf: 0.5 * 2^3 e^-2 / 3!
        let pmf = 0.5 * 8.0 * (-2.0f64).exp() / 6.0;
        assert!((zip_nll(0.0, 2f64.ln(), 3) - (-pmf.ln())).abs() < 1e-12);
        assert!((zip_nll(0.0, 2f64.ln(), 3) - 2.405_465_108_108_164).abs() < 1e-12);
    }

    #[test]
    fn zip_nll_non_negative_and_gradients() {
        for &a in &[-8.0, -1.0, 0.0, 0.7, 5.0] {
            for &l in &[-3.0, 0.0, 1.5, 4.0] {
                for x in [0u64, 1, 2, 7, 40] {
                    let (f, da, dl) = zip_nll_grad(a, l, x);
                    assert!(f >= -1e-12, "{a} {l} {x}");
                    let h = 1e-6;
                    let na = (zip_nll(a + h, l, x) - zip_nll(a - h, l, x)) / (2.0 * h);
                    let nl = (zip_nll(a, l + h, x) - zip_nll(a, l - h, x)) / (2.0 * h);
                    assert!((da - na).abs() < 1e-6 * (1.0 + na.abs()));
                    assert!((dl - nl).abs() < 1e-6 * (1.0 + nl.abs()));
                }
            }
        }
        assert!(zip_nll(1e308, -1e308, 0).is_finite());
    }

    #[test]
    fn location_weights() {
        for r in 0..5 {
            let total: f64 = ring_of_positions(r).iter().map(|&d| location_weight(d, r)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((location_weight(0, 1) / location_weight(1, 1) - 2.0).abs() < 1e-12);
        for d in 0..3 {
            assert!(location_weight(d, 3) > location_weight(d + 1, 3));
        }
    }

    #[test]
    fn patches_from_matrix() {
        let vocab = Arc::new(TagVocabulary::default_754());
        let w = vocab.len();
        let mut counts = vec![0u32; w];
        counts[3] = 4;
        let m = RegionFeatureMatrix::new("t", vocab, vec![Axial::new(5, 5)], counts.clone()).unwrap();
        let id = HexCellId {
            city_id: "t".into(),
            axial: Axial::new(5, 5),
        };
        let p = build_patch(&id, &m, 1, true).unwrap();
        assert_eq!(p.mask, vec![true, false, false, false, false, false, false]);
        assert!(p.counts[w..].iter().all(|&c| c == 0.0));
        assert_eq!(p.row(0).iter().map(|&c| c as u32).collect::<Vec<_>>(), counts);
        assert_eq!(build_patch(&id, &m, 3, true).unwrap().positions(), 37);
        let other = HexCellId {
            city_id: "u".into(),
            axial: Axial::ORIGIN,
        };
        assert!(matches!(build_patch(&other, &m, 1, true), Err(Error::CityMismatch(..))));
    }

    #[test]
    fn neighbor_table_matches_geometry() {
        let nb = neighbor_table(3);
        let offsets = Axial::ORIGIN.spiral(3);
        for (p, list) in nb.iter().enumerate() {
            let expected = offsets.iter().filter(|o| o.distance(offsets[p]) == 1).count();
            assert_eq!(list.len(), expected);
        }
        assert_eq!(nb[0].len(), 6);
    }

    #[test]
    fn forward_basics() {
        let cfg = EmbedConfig::new(36);
        let params = EncoderParams::init(cfg, 1).unwrap();
        let mut patch = random_patch(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let zero = HexPatch {
            counts: vec![0.0; patch.counts.len()],
            ..patch.clone()
        };
        let out = forward(&params, &zero).unwrap();
        assert!(out.loss.is_finite());
        assert_eq!(out.embedding.len(), 50);
        assert!(out.embedding.iter().all(|v| v.is_finite()));
        let a = forward(&params, &patch).unwrap();
        let b = forward(&params, &patch.clone()).unwrap();
        assert_eq!(a.embedding, b.embedding);
        patch.radius = 2;
        assert!(matches!(forward(&params, &patch), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..8 {
            let cfg = tiny_cfg(1 + trial % 4, 1 + (trial % 2) as u32);
            let params = EncoderParams::init(cfg, trial as u64).unwrap();
            let patch = random_patch(&cfg, &mut rng);
            let err = grad_check(&params, &patch, 1e-4).unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn masked_inputs_have_zero_gradient() {
        let cfg = tiny_cfg(3, 2);
        let params = EncoderParams::init(cfg, 4).unwrap();
        let mut patch = random_patch(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        patch.mask[4] = false;
        patch.mask[9] = false;
        let g = Network::new(cfg).input_gradient(&params, &patch).unwrap();
        for p in [4, 9] {
            assert!(g[p * 3..(p + 1) * 3].iter().all(|&v| v == 0.0));
        }
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn finite_difference_is_second_order() {
        let cfg = tiny_cfg(2, 1);
        let params = EncoderParams::init(cfg, 9).unwrap();
        let patch = random_patch(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let net = Network::new(cfg);
        let (_, g) = net.loss_and_grad(&params, &patch).unwrap();
        let i = Layout::new(cfg).d1_w + 3;
        let fd = |eps: f64| {
            let mut p = params.clone();
            p.values[i] += eps;
            let up = net.forward(&p, &patch).unwrap().loss;
            p.values[i] -= 2.0 * eps;
            let down = net.forward(&p, &patch).unwrap().loss;
            (up - down) / (2.0 * eps)
        };
        let e1 = (fd(1e-3) - g[i]).abs();
        let e2 = (fd(2e-3) - g[i]).abs();
        // doubling eps roughly quadruples the truncation error
        assert!(e2 / e1 > 3.0 && e2 / e1 < 5.0, "{e1} {e2}");
    }

    #[test]
    fn rotation_covariance() {
        let cfg = EmbedConfig {
            conv_channels: 4,
            hidden: 16,
            ..EmbedConfig::new(5)
        };
        let params = EncoderParams::init(cfg, 3).unwrap();
        let patch = random_patch(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let rotated = patch.rotated();
        // permute the first dense layer's input columns to follow the positions
        let layout = Layout::new(cfg);
        let (c, h, p) = (cfg.conv_channels, cfg.hidden, cfg.positions());
        let perm = rotation_permutation(cfg.radius);
        let mut rp = params.clone();
        for row in 0..h {
            for (old, &new) in perm.iter().enumerate() {
                for ch in 0..c {
                    rp.values[layout.d1_w + row * p * c + new * c + ch] =
                        params.values[layout.d1_w + row * p * c + old * c + ch];
                }
            }
        }
        let net = Network::new(cfg);
        let a = net.embed(&params, &patch).unwrap();
        let b = net.embed(&rp, &rotated).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut six = patch.clone();
        for _ in 0..6 {
            six = six.rotated();
        }
        assert_eq!(six, patch);
    }

    #[test]
    fn one_step_descends() {
        let cfg = tiny_cfg(4, 1);
        let params = EncoderParams::init(cfg, 21).unwrap();
        let patch = random_patch(&cfg, &mut ChaCha8Rng::seed_from_u64(21));
        let net = Network::new(cfg);
        let (l0, g) = net.loss_and_grad(&params, &patch).unwrap();
        let mut stepped = params.clone();
        for (v, gi) in stepped.values.iter_mut().zip(&g) {
            *v -= 1e-3 * gi;
        }
        assert!(net.forward(&stepped, &patch).unwrap().loss < l0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let city = synth_city(&SynthConfig::new(4, 60, 600, 1.0)).unwrap();
        let patches = build_patches(&city.features, 2, true);
        let cfg = EmbedConfig {
            radius: 2,
            conv_channels: 8,
            hidden: 32,
            ..EmbedConfig::new(36)
        };
        let init = EncoderParams::init(cfg, 4).unwrap();
        let tc = TrainConfig::new(15, 4);
        let a = train(&init, &patches, &tc).unwrap();
        let b = train(&init, &patches, &tc).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        let first = a.loss_curve[0];
        let last = *a.loss_curve.last().unwrap();
        assert!(last < 0.8 * first, "{first} -> {last}");

        let none = train(&init, &patches, &TrainConfig::new(0, 4)).unwrap();
        assert_eq!(none.params, init);
        assert!(matches!(
            train(&init, &patches[..10], &tc),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn checkpoint_and_csv_round_trip() {
        let cfg = tiny_cfg(3, 1);
        let params = EncoderParams::init(cfg, 8).unwrap();
        let json = serde_json::to_string(&params.checkpoint()).unwrap();
        let back = EncoderParams::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, params);
        let mut bad = params.checkpoint();
        bad.values.pop();
        assert!(EncoderParams::from_checkpoint(bad).is_err());

        let m = EmbeddingMatrix {
            city_id: "t".into(),
            cells: vec![Axial::new(0, 0), Axial::new(-1, 2)],
            dim: 3,
            values: vec![0.1, -2.5, 1e-17, 3.0, 0.0, -0.25],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("cell_q,cell_r,e0,e1,e2\n"));
        assert_eq!(EmbeddingMatrix::read_csv(buf.as_slice(), "t").unwrap(), m);
    }
}
