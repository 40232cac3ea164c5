//! Forward pass: per-channel temporal self-attention (diagonal variant) or
//! standard multi-head attention (full variant), a pre-norm residual block
//! with a depthwise feed-forward, the per-concept affine + Softplus
//! bottleneck, a linear head, and masked log-sum-exp pooling over time.
//!
//! All computations are masked: statistics, attention keys, and pooling only
//! ever see the valid (left-aligned) prefix of each sequence, so appending
//! padded steps leaves every valid quantity unchanged.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ConceptSequence, PaddedBatch};
use crate::error::{Error, Result};

/// Epsilon inside the per-channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Attention variant: one temporal map per concept, or standard multi-head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Diagonal,
    Full,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Diagonal => write!(f, "diagonal"),
            Variant::Full => write!(f, "full"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(Variant::Diagonal),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown attention variant `{other}` (expected `diagonal` or `full`)"
            ))),
        }
    }
}

/// Full multi-head attention parameters (`C x C` projections, no biases).
#[derive(Debug, Clone, PartialEq)]
pub struct FullAttn {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub heads: usize,
}

/// Per-block attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnParams {
    /// One scalar per channel for each of Q, K, V.
    Diagonal {
        theta_q: Array1<f64>,
        theta_k: Array1<f64>,
        theta_v: Array1<f64>,
    },
    Full(FullAttn),
}

impl AttnParams {
    pub fn variant(&self) -> Variant {
        match self {
            AttnParams::Diagonal { .. } => Variant::Diagonal,
            AttnParams::Full(_) => Variant::Full,
        }
    }
}

/// One temporal block: attention plus per-channel norm affine and a
/// depthwise scalar feed-forward (two 1x1 "convolutions" around a GELU).
///
/// The norm affine (`norm_scale`, `norm_shift`) is shared by both
/// normalization sites of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub norm_scale: Array1<f64>,
    pub norm_shift: Array1<f64>,
    pub ffn_w1: Array1<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array1<f64>,
    pub ffn_b2: Array1<f64>,
}

/// Every learnable tensor plus the architectural switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    /// Per-concept affine scale, applied before Softplus when `affine_enabled`.
    pub gamma: Array1<f64>,
    pub delta: Array1<f64>,
    pub affine_enabled: bool,
    /// Classifier, `K x C`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// LSE pooling temperature, > 0.
    pub tau: f64,
    /// Pre-norm residual connections on, or the literal non-residual pipeline.
    pub residual: bool,
    pub nonneg_w: bool,
    /// Normalized masked LSE (divide by the valid count) vs. the raw sum form.
    pub lse_normalized: bool,
    pub dropout_rate: f64,
}

impl ModelParams {
    pub fn concepts(&self) -> usize {
        self.gamma.len()
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn variant(&self) -> Variant {
        self.blocks[0].attn.variant()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        match &self.blocks[0].attn {
            AttnParams::Diagonal { .. } => 1,
            AttnParams::Full(fa) => fa.heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.concepts();
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            let lens = [
                blk.norm_scale.len(),
                blk.norm_shift.len(),
                blk.ffn_w1.len(),
                blk.ffn_b1.len(),
                blk.ffn_w2.len(),
                blk.ffn_b2.len(),
            ];
            if lens.iter().any(|&l| l != c) {
                return Err(Error::Config(format!("block {i} has inconsistent widths")));
            }
            match &blk.attn {
                AttnParams::Diagonal { theta_q, theta_k, theta_v } => {
                    if theta_q.len() != c || theta_k.len() != c || theta_v.len() != c {
                        return Err(Error::Config(format!("block {i} theta widths != C")));
                    }
                }
                AttnParams::Full(fa) => {
                    for (name, m) in [("w_q", &fa.w_q), ("w_k", &fa.w_k), ("w_v", &fa.w_v), ("w_o", &fa.w_o)] {
                        if m.nrows() != c || m.ncols() != c {
                            return Err(Error::Config(format!("block {i} {name} is not C x C")));
                        }
                    }
                    if fa.heads == 0 || c % fa.heads != 0 {
                        return Err(Error::Config(format!(
                            "head count {} must divide C = {c}",
                            fa.heads
                        )));
                    }
                }
            }
        }
        if self.w.ncols() != c || self.w.nrows() != self.b.len() {
            return Err(Error::Config("classifier shape does not match C/K".into()));
        }
        if self.nonneg_w && self.w.iter().any(|&v| v < 0.0) {
            return Err(Error::Config(
                "nonnegativity is on but W has negative entries".into(),
            ));
        }
        let finite = self.to_flat().iter().all(|v| v.is_finite());
        if !finite || !self.tau.is_finite() {
            return Err(Error::Numeric("model parameters contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Architectural configuration used to initialize [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub heads: usize,
    pub depth: usize,
    pub tau: f64,
    pub residual: bool,
    pub affine: bool,
    pub nonneg_w: bool,
    pub lse_normalized: bool,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Diagonal,
            heads: 4,
            depth: 1,
            tau: 1.0,
            residual: true,
            affine: true,
            nonneg_w: true,
            lse_normalized: true,
            dropout_rate: 0.1,
        }
    }
}

/// Initialize parameters so the block starts near the identity:
/// `theta_v = 1`, `ffn_w2 = 0`, unit norm scales, zero shifts and biases.
pub fn init_params(c: usize, k: usize, cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    if c == 0 || k == 0 {
        return Err(Error::Config("need C >= 1 and K >= 1".into()));
    }
    if cfg.depth == 0 {
        return Err(Error::Config("depth must be >= 1".into()));
    }
    if cfg.variant == Variant::Full && (cfg.heads == 0 || c % cfg.heads != 0) {
        return Err(Error::Config(format!(
            "head count {} must divide C = {c}",
            cfg.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(0.0, 0.02).unwrap();
    let head_scale = Normal::new(0.0, 1.0 / (c as f64).sqrt()).unwrap();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let attn = match cfg.variant {
            Variant::Diagonal => AttnParams::Diagonal {
                theta_q: Array1::from_shape_fn(c, |_| small.sample(&mut rng)),
                theta_k: Array1::from_shape_fn(c, |_| small.sample(&mut rng)),
                theta_v: Array1::ones(c),
            },
            Variant::Full => AttnParams::Full(FullAttn {
                w_q: Array2::from_shape_fn((c, c), |_| small.sample(&mut rng)),
                w_k: Array2::from_shape_fn((c, c), |_| small.sample(&mut rng)),
                // small value/output projections start the attention branch
                // near zero, mirroring theta_v = 1 / ffn_w2 = 0 in the
                // diagonal variant (residual carries the signal at init)
                w_v: Array2::from_shape_fn((c, c), |_| head_scale.sample(&mut rng)),
                w_o: Array2::from_shape_fn((c, c), |_| head_scale.sample(&mut rng)),
                heads: cfg.heads,
            }),
        };
        blocks.push(BlockParams {
            attn,
            norm_scale: Array1::ones(c),
            norm_shift: Array1::zeros(c),
            ffn_w1: Array1::ones(c),
            ffn_b1: Array1::zeros(c),
            ffn_w2: Array1::zeros(c),
            ffn_b2: Array1::zeros(c),
        });
    }
    let mut w = Array2::from_shape_fn((k, c), |_| head_scale.sample(&mut rng));
    if cfg.nonneg_w {
        w.mapv_inplace(|v| v.max(0.0));
    }
    let params = ModelParams {
        blocks,
        gamma: Array1::ones(c),
        delta: Array1::zeros(c),
        affine_enabled: cfg.affine,
        w,
        b: Array1::zeros(k),
        tau: cfg.tau,
        residual: cfg.residual,
        nonneg_w: cfg.nonneg_w,
        lse_normalized: cfg.lse_normalized,
        dropout_rate: cfg.dropout_rate,
    };
    params.validate()?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Parameter flattening (shared by the optimizer and the gradient checker)
// ---------------------------------------------------------------------------

/// One named contiguous region of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Participates in decoupled weight decay (weights yes, biases/affines no).
    pub weight_decay: bool,
    /// Clamped to >= 0 after each optimizer step when nonnegativity is on.
    pub nonneg: bool,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub spans: Vec<ParamSpan>,
    pub total: usize,
}

impl ModelParams {
    pub fn layout(&self) -> ParamLayout {
        let mut spans = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, decay: bool, nonneg: bool, offset: &mut usize| {
            spans.push(ParamSpan { name, offset: *offset, len, weight_decay: decay, nonneg });
            *offset += len;
        };
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = format!("block{i}.");
            match &blk.attn {
                AttnParams::Diagonal { theta_q, theta_k, theta_v } => {
                    push(format!("{p}theta_q"), theta_q.len(), true, false, &mut offset);
                    push(format!("{p}theta_k"), theta_k.len(), true, false, &mut offset);
                    push(format!("{p}theta_v"), theta_v.len(), true, false, &mut offset);
                }
                AttnParams::Full(fa) => {
                    push(format!("{p}w_q"), fa.w_q.len(), true, false, &mut offset);
                    push(format!("{p}w_k"), fa.w_k.len(), true, false, &mut offset);
                    push(format!("{p}w_v"), fa.w_v.len(), true, false, &mut offset);
                    push(format!("{p}w_o"), fa.w_o.len(), true, false, &mut offset);
                }
            }
            push(format!("{p}norm_scale"), blk.norm_scale.len(), false, false, &mut offset);
            push(format!("{p}norm_shift"), blk.norm_shift.len(), false, false, &mut offset);
            push(format!("{p}ffn_w1"), blk.ffn_w1.len(), true, false, &mut offset);
            push(format!("{p}ffn_b1"), blk.ffn_b1.len(), false, false, &mut offset);
            push(format!("{p}ffn_w2"), blk.ffn_w2.len(), true, false, &mut offset);
            push(format!("{p}ffn_b2"), blk.ffn_b2.len(), false, false, &mut offset);
        }
        push("gamma".into(), self.gamma.len(), false, false, &mut offset);
        push("delta".into(), self.delta.len(), false, false, &mut offset);
        push("w".into(), self.w.len(), true, true, &mut offset);
        push("b".into(), self.b.len(), false, false, &mut offset);
        ParamLayout { spans, total: offset }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for blk in &self.blocks {
            match &blk.attn {
                AttnParams::Diagonal { theta_q, theta_k, theta_v } => {
                    out.extend(theta_q.iter());
                    out.extend(theta_k.iter());
                    out.extend(theta_v.iter());
                }
                AttnParams::Full(fa) => {
                    out.extend(fa.w_q.iter());
                    out.extend(fa.w_k.iter());
                    out.extend(fa.w_v.iter());
                    out.extend(fa.w_o.iter());
                }
            }
            out.extend(blk.norm_scale.iter());
            out.extend(blk.norm_shift.iter());
            out.extend(blk.ffn_w1.iter());
            out.extend(blk.ffn_b1.iter());
            out.extend(blk.ffn_w2.iter());
            out.extend(blk.ffn_b2.iter());
        }
        out.extend(self.gamma.iter());
        out.extend(self.delta.iter());
        out.extend(self.w.iter());
        out.extend(self.b.iter());
        out
    }

    /// Overwrite every learnable tensor from a flat vector produced by
    /// [`ModelParams::to_flat`] (same shapes, same order).
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let take = |arr: &mut [f64], pos: &mut usize| {
            arr.copy_from_slice(&flat[*pos..*pos + arr.len()]);
            *pos += arr.len();
        };
        for blk in &mut self.blocks {
            match &mut blk.attn {
                AttnParams::Diagonal { theta_q, theta_k, theta_v } => {
                    take(theta_q.as_slice_mut().unwrap(), &mut pos);
                    take(theta_k.as_slice_mut().unwrap(), &mut pos);
                    take(theta_v.as_slice_mut().unwrap(), &mut pos);
                }
                AttnParams::Full(fa) => {
                    take(fa.w_q.as_slice_mut().unwrap(), &mut pos);
                    take(fa.w_k.as_slice_mut().unwrap(), &mut pos);
                    take(fa.w_v.as_slice_mut().unwrap(), &mut pos);
                    take(fa.w_o.as_slice_mut().unwrap(), &mut pos);
                }
            }
            take(blk.norm_scale.as_slice_mut().unwrap(), &mut pos);
            take(blk.norm_shift.as_slice_mut().unwrap(), &mut pos);
            take(blk.ffn_w1.as_slice_mut().unwrap(), &mut pos);
            take(blk.ffn_b1.as_slice_mut().unwrap(), &mut pos);
            take(blk.ffn_w2.as_slice_mut().unwrap(), &mut pos);
            take(blk.ffn_b2.as_slice_mut().unwrap(), &mut pos);
        }
        take(self.gamma.as_slice_mut().unwrap(), &mut pos);
        take(self.delta.as_slice_mut().unwrap(), &mut pos);
        take(self.w.as_slice_mut().unwrap(), &mut pos);
        take(self.b.as_slice_mut().unwrap(), &mut pos);
        debug_assert_eq!(pos, flat.len());
    }
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

/// Numerically stable Softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid (the derivative of Softplus).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_prime(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Argmax with deterministic tie-breaking (lowest index wins).
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Number of valid steps; checks the mask is a non-empty contiguous prefix.
pub(crate) fn valid_len(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&m| m).count();
    if n == 0 {
        return Err(Error::Input("sequence is entirely masked".into()));
    }
    if mask[n..].iter().any(|&m| m) {
        return Err(Error::Input(
            "mask must be a left-aligned contiguous prefix".into(),
        ));
    }
    Ok(n)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multiplication counters for the complexity checks.
///
/// `map_mults` counts the arithmetic of forming and applying the `T x T`
/// attention maps (score products and weighted-value products); `proj_mults`
/// counts the per-channel QKV projections. The two components scale as
/// `C * T^2` and `C * T` respectively.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub proj_mults: u64,
    pub map_mults: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.proj_mults + self.map_mults
    }
}

/// Per-channel temporal self-attention.
///
/// `Q[:,c] = theta_q[c] * x[:,c]` (same for K, V), scores
/// `S[c,t,u] = Q[t,c] * K[u,c]` with no scale factor (the per-channel key
/// dimension is 1), softmax over valid `u`, output `sum_u attn * V[u,c]`.
/// Rows at masked `t` are zeroed, as is the masked region of the maps.
pub fn diagonal_attention(
    x: ArrayView2<'_, f64>,
    mask: &[bool],
    theta_q: &Array1<f64>,
    theta_k: &Array1<f64>,
    theta_v: &Array1<f64>,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let mut count = OpCount::default();
    diagonal_attention_counted(x, mask, theta_q, theta_k, theta_v, &mut count)
}

/// [`diagonal_attention`] with multiplication counting; the counters are
/// incremented alongside the loops that do the work, so they reflect the
/// arithmetic actually performed (masked steps cost nothing).
pub fn diagonal_attention_counted(
    x: ArrayView2<'_, f64>,
    mask: &[bool],
    theta_q: &Array1<f64>,
    theta_k: &Array1<f64>,
    theta_v: &Array1<f64>,
    count: &mut OpCount,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (t_len, c_len) = x.dim();
    if mask.len() != t_len {
        return Err(Error::Input(format!(
            "mask length {} does not match T = {t_len}",
            mask.len()
        )));
    }
    if theta_q.len() != c_len {
        return Err(Error::Input(format!(
            "theta width {} does not match C = {c_len}",
            theta_q.len()
        )));
    }
    let n = valid_len(mask)?;
    let mut out = Array2::zeros((t_len, c_len));
    let mut attn = Array3::zeros((c_len, t_len, t_len));
    let mut scores = vec![0.0_f64; n];
    for c in 0..c_len {
        let (tq, tk, tv) = (theta_q[c], theta_k[c], theta_v[c]);
        let col: Vec<f64> = (0..n).map(|t| x[[t, c]]).collect();
        let q: Vec<f64> = col.iter().map(|&v| tq * v).collect();
        let k: Vec<f64> = col.iter().map(|&v| tk * v).collect();
        let v: Vec<f64> = col.iter().map(|&v| tv * v).collect();
        count.proj_mults += 3 * n as u64;
        for t in 0..n {
            let mut max = f64::NEG_INFINITY;
            for u in 0..n {
                scores[u] = q[t] * k[u];
                if scores[u] > max {
                    max = scores[u];
                }
            }
            count.map_mults += n as u64;
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            let mut acc = 0.0;
            for u in 0..n {
                let w = scores[u] / denom;
                attn[[c, t, u]] = w;
                acc += w * v[u];
            }
            count.map_mults += n as u64;
            out[[t, c]] = acc;
        }
    }
    Ok((out, attn))
}

/// Standard multi-head attention over the `C` channels with per-head
/// dimension `C / H` and `1/sqrt(C/H)` score scaling. Key-side masking as in
/// the diagonal variant; rows at masked `t` are zeroed. Returns the `H x T x T`
/// head maps.
pub fn full_attention(
    x: ArrayView2<'_, f64>,
    mask: &[bool],
    fa: &FullAttn,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (t_len, c_len) = x.dim();
    if mask.len() != t_len {
        return Err(Error::Input(format!(
            "mask length {} does not match T = {t_len}",
            mask.len()
        )));
    }
    if fa.w_q.nrows() != c_len {
        return Err(Error::Input(format!(
            "projection width {} does not match C = {c_len}",
            fa.w_q.nrows()
        )));
    }
    if fa.heads == 0 || c_len % fa.heads != 0 {
        return Err(Error::Config(format!(
            "head count {} must divide C = {c_len}",
            fa.heads
        )));
    }
    let n = valid_len(mask)?;
    let head_dim = c_len / fa.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    // row convention: projections act by right-multiplication
    let q = x.dot(&fa.w_q);
    let k = x.dot(&fa.w_k);
    let v = x.dot(&fa.w_v);
    let mut attn = Array3::zeros((fa.heads, t_len, t_len));
    let mut concat = Array2::zeros((t_len, c_len));
    for h in 0..fa.heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        for t in 0..n {
            let mut scores = vec![0.0_f64; n];
            let mut max = f64::NEG_INFINITY;
            for (u, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in lo..hi {
                    dot += q[[t, d]] * k[[u, d]];
                }
                *s = dot * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for (u, s) in scores.iter().enumerate() {
                let w = s / denom;
                attn[[h, t, u]] = w;
                for d in lo..hi {
                    concat[[t, d]] += w * v[[u, d]];
                }
            }
        }
    }
    let mut out = concat.dot(&fa.w_o);
    for t in n..t_len {
        out.row_mut(t).fill(0.0);
    }
    Ok((out, attn))
}

// ---------------------------------------------------------------------------
// Per-channel normalization
// ---------------------------------------------------------------------------

pub(crate) struct NormCache {
    pub inv_std: Array1<f64>,
    /// Centered, scaled inputs; zero at masked steps.
    pub xhat: Array2<f64>,
}

/// Temporal layer norm within each channel, statistics over valid steps only
/// (biased variance). Masked rows of the output are zero.
pub(crate) fn masked_norm(
    x: &Array2<f64>,
    n: usize,
    scale: &Array1<f64>,
    shift: &Array1<f64>,
) -> (Array2<f64>, NormCache) {
    let (t_len, c_len) = x.dim();
    let mut out = Array2::zeros((t_len, c_len));
    let mut xhat = Array2::zeros((t_len, c_len));
    let mut inv_std = Array1::zeros(c_len);
    for c in 0..c_len {
        let mut mean = 0.0;
        for t in 0..n {
            mean += x[[t, c]];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for t in 0..n {
            let d = x[[t, c]] - mean;
            var += d * d;
        }
        var /= n as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = inv;
        for t in 0..n {
            let h = (x[[t, c]] - mean) * inv;
            xhat[[t, c]] = h;
            out[[t, c]] = h * scale[c] + shift[c];
        }
    }
    (out, NormCache { inv_std, xhat })
}

// ---------------------------------------------------------------------------
// Block forward
// ---------------------------------------------------------------------------

pub(crate) enum AttnCache {
    Diagonal,
    Full {
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        concat: Array2<f64>,
    },
}

pub(crate) struct BlockCache {
    pub norm1: Option<NormCache>,
    /// What the attention consumed (normed input, or the raw input when
    /// residuals are off).
    pub attn_in: Array2<f64>,
    pub attn_cache: AttnCache,
    pub attn_weights: Array3<f64>,
    pub norm2: NormCache,
    pub n2: Array2<f64>,
    pub ffn_u: Array2<f64>,
    pub ffn_g: Array2<f64>,
    pub drop_mask: Option<Array2<f64>>,
    pub output: Array2<f64>,
}

fn attention_dispatch(
    x: &Array2<f64>,
    mask: &[bool],
    attn: &AttnParams,
) -> Result<(Array2<f64>, Array3<f64>, AttnCache)> {
    match attn {
        AttnParams::Diagonal { theta_q, theta_k, theta_v } => {
            let (out, w) = diagonal_attention(x.view(), mask, theta_q, theta_k, theta_v)?;
            Ok((out, w, AttnCache::Diagonal))
        }
        AttnParams::Full(fa) => {
            let (out, w) = full_attention(x.view(), mask, fa)?;
            let q = x.dot(&fa.w_q);
            let k = x.dot(&fa.w_k);
            let v = x.dot(&fa.w_v);
            // reconstruct the pre-projection concat from out = concat . w_o is
            // ill-conditioned; recompute it directly instead
            let head_dim = x.ncols() / fa.heads;
            let n = valid_len(mask)?;
            let mut concat = Array2::zeros(x.raw_dim());
            for h in 0..fa.heads {
                let lo = h * head_dim;
                for t in 0..n {
                    for u in 0..n {
                        let wgt = w[[h, t, u]];
                        for d in lo..lo + head_dim {
                            concat[[t, d]] += wgt * v[[u, d]];
                        }
                    }
                }
            }
            Ok((out, w, AttnCache::Full { q, k, v, concat }))
        }
    }
}

fn run_block(
    input: &Array2<f64>,
    mask: &[bool],
    n: usize,
    blk: &BlockParams,
    residual: bool,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<BlockCache> {
    let (t_len, c_len) = input.dim();
    // attention sub-layer
    let (norm1, attn_in) = if residual {
        let (n1, cache) = masked_norm(input, n, &blk.norm_scale, &blk.norm_shift);
        (Some(cache), n1)
    } else {
        (None, input.clone())
    };
    let (attn_out, attn_weights, attn_cache) = attention_dispatch(&attn_in, mask, &blk.attn)?;
    let x1 = if residual { input + &attn_out } else { attn_out };
    // feed-forward sub-layer
    let (n2, norm2) = masked_norm(&x1, n, &blk.norm_scale, &blk.norm_shift);
    let mut ffn_u = Array2::zeros((t_len, c_len));
    let mut ffn_g = Array2::zeros((t_len, c_len));
    let mut drop_mask = None;
    for t in 0..n {
        for c in 0..c_len {
            let u = blk.ffn_w1[c] * n2[[t, c]] + blk.ffn_b1[c];
            ffn_u[[t, c]] = u;
            ffn_g[[t, c]] = gelu(u);
        }
    }
    let mut hidden = ffn_g.clone();
    if let Some((rng, rate)) = dropout {
        use rand::Rng;
        let keep = 1.0 - rate;
        let mut dm = Array2::ones((t_len, c_len));
        for t in 0..n {
            for c in 0..c_len {
                dm[[t, c]] = if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep };
                hidden[[t, c]] = ffn_g[[t, c]] * dm[[t, c]];
            }
        }
        drop_mask = Some(dm);
    }
    let mut output = if residual { x1.clone() } else { Array2::zeros((t_len, c_len)) };
    for t in 0..n {
        for c in 0..c_len {
            output[[t, c]] += blk.ffn_w2[c] * hidden[[t, c]] + blk.ffn_b2[c];
        }
    }
    Ok(BlockCache {
        norm1,
        attn_in,
        attn_cache,
        attn_weights,
        norm2,
        n2,
        ffn_u,
        ffn_g,
        drop_mask,
        output,
    })
}

/// Run the temporal trunk (all blocks) on one sequence. Returns the refined
/// activations and the attention maps of every block.
pub fn block_forward(
    x: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &ModelParams,
    training: bool,
    rng_seed: u64,
) -> Result<(Array2<f64>, Vec<Array3<f64>>)> {
    let (caches, _) = run_blocks(&x.to_owned(), mask, params, training, rng_seed)?;
    let maps = caches.iter().map(|c| c.attn_weights.clone()).collect();
    Ok((caches.last().unwrap().output.clone(), maps))
}

fn run_blocks(
    x: &Array2<f64>,
    mask: &[bool],
    params: &ModelParams,
    training: bool,
    rng_seed: u64,
) -> Result<(Vec<BlockCache>, usize)> {
    if x.ncols() != params.concepts() {
        return Err(Error::Input(format!(
            "input has {} channels, model expects {}",
            x.ncols(),
            params.concepts()
        )));
    }
    let n = valid_len(mask)?;
    let use_dropout = training && params.dropout_rate > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut caches = Vec::with_capacity(params.blocks.len());
    let mut current = x.clone();
    for blk in &params.blocks {
        let dropout = if use_dropout {
            Some((&mut rng, params.dropout_rate))
        } else {
            None
        };
        let cache = run_block(&current, mask, n, blk, params.residual, dropout)?;
        current = cache.output.clone();
        caches.push(cache);
    }
    Ok((caches, n))
}

// ---------------------------------------------------------------------------
// Bottleneck and pooling
// ---------------------------------------------------------------------------

/// Per-concept affine + Softplus: `Z = softplus(gamma (.) X_L + delta)`
/// (plain `softplus(X_L)` when the affine is disabled).
pub fn bottleneck(x_l: ArrayView2<'_, f64>, params: &ModelParams) -> Array2<f64> {
    let mut z = Array2::zeros(x_l.raw_dim());
    for ((t, c), &v) in x_l.indexed_iter() {
        let pre = if params.affine_enabled {
            params.gamma[c] * v + params.delta[c]
        } else {
            v
        };
        z[[t, c]] = softplus(pre);
    }
    z
}

/// Masked log-sum-exp pooling per column with the max-subtraction trick.
///
/// Normalized form: `(1/tau) ln( sum_valid exp(tau v) / n_valid )`, which is
/// invariant on constant inputs and interpolates masked mean (`tau -> 0`) to
/// masked max (`tau -> inf`). The unnormalized form omits the division.
pub fn lse_pool(
    values: ArrayView2<'_, f64>,
    mask: &[bool],
    tau: f64,
    normalized: bool,
) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("tau must be > 0, got {tau}")));
    }
    if mask.len() != values.nrows() {
        return Err(Error::Input(format!(
            "mask length {} does not match T = {}",
            mask.len(),
            values.nrows()
        )));
    }
    let n = valid_len(mask)?;
    let cols = values.ncols();
    let mut out = Array1::zeros(cols);
    for j in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for t in 0..n {
            if values[[t, j]] > max {
                max = values[[t, j]];
            }
        }
        let mut sum = 0.0;
        for t in 0..n {
            sum += (tau * (values[[t, j]] - max)).exp();
        }
        let log_term = if normalized {
            (sum / n as f64).ln()
        } else {
            sum.ln()
        };
        out[j] = max + log_term / tau;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

/// Everything a forward pass produces, kept for explanation and intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x_in: Array2<f64>,
    pub mask: Vec<bool>,
    /// Attention maps per block: `C x T x T` (diagonal) or `H x T x T` (full).
    pub attn_blocks: Vec<Array3<f64>>,
    /// Post-block activations, `T x C`.
    pub x_l: Array2<f64>,
    /// Nonnegative bottleneck activations, `T x C`.
    pub z: Array2<f64>,
    /// Per-time logits, `T x K`; `logits_t[t] = W z_t + b` for every row.
    pub logits_t: Array2<f64>,
    pub pooled_logits: Array1<f64>,
    pub pooled_concepts: Array1<f64>,
    pub prediction: usize,
    pub variant: Variant,
}

impl ForwardTrace {
    /// Attention maps of the first block (the one reading raw concept inputs).
    pub fn attn(&self) -> &Array3<f64> {
        &self.attn_blocks[0]
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub(crate) struct ForwardStash {
    pub blocks: Vec<BlockCache>,
    /// Pre-Softplus bottleneck input (post-affine when enabled).
    pub pre_softplus: Array2<f64>,
    pub n: usize,
}

pub(crate) fn forward_with_stash(
    x: &Array2<f64>,
    mask: &[bool],
    params: &ModelParams,
    training: bool,
    rng_seed: u64,
) -> Result<(ForwardTrace, ForwardStash)> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("input contains non-finite values".into()));
    }
    let (caches, n) = run_blocks(x, mask, params, training, rng_seed)?;
    let x_l = caches.last().unwrap().output.clone();
    let (t_len, c_len) = x_l.dim();
    let mut pre = Array2::zeros((t_len, c_len));
    for ((t, c), &v) in x_l.indexed_iter() {
        pre[[t, c]] = if params.affine_enabled {
            params.gamma[c] * v + params.delta[c]
        } else {
            v
        };
    }
    let z = pre.mapv(softplus);
    // row-wise matvec keeps the linear-head identity logits_t[t] = W z_t + b
    // bit-exact regardless of matmul blocking
    let k_len = params.classes();
    let mut logits_t = Array2::zeros((t_len, k_len));
    for t in 0..t_len {
        let row = params.w.dot(&z.row(t)) + &params.b;
        logits_t.row_mut(t).assign(&row);
    }
    let pooled_logits = lse_pool(logits_t.view(), mask, params.tau, params.lse_normalized)?;
    let pooled_concepts = lse_pool(z.view(), mask, params.tau, params.lse_normalized)?;
    let prediction = argmax(&pooled_logits);
    let trace = ForwardTrace {
        x_in: x.clone(),
        mask: mask.to_vec(),
        attn_blocks: caches.iter().map(|c| c.attn_weights.clone()).collect(),
        x_l,
        z,
        logits_t,
        pooled_logits,
        pooled_concepts,
        prediction,
        variant: params.variant(),
    };
    Ok((trace, ForwardStash { blocks: caches, pre_softplus: pre, n }))
}

/// Forward pass over one unpadded sequence.
pub fn forward(
    sample: &ConceptSequence,
    params: &ModelParams,
    training: bool,
    rng_seed: u64,
) -> Result<ForwardTrace> {
    let mask = vec![true; sample.len()];
    forward_masked(sample.activations.view(), &mask, params, training, rng_seed)
}

/// Forward pass over an explicitly masked (possibly padded) sequence.
pub fn forward_masked(
    x: ArrayView2<'_, f64>,
    mask: &[bool],
    params: &ModelParams,
    training: bool,
    rng_seed: u64,
) -> Result<ForwardTrace> {
    let (trace, _) = forward_with_stash(&x.to_owned(), mask, params, training, rng_seed)?;
    Ok(trace)
}

/// Mix a base seed with a sample index into an independent dropout stream.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Forward every batch member; sample `b` uses dropout stream
/// `sample_seed(base_seed, b)`, so parallel and serial execution agree.
pub fn forward_batch(
    batch: &PaddedBatch,
    params: &ModelParams,
    training: bool,
    base_seed: u64,
) -> Result<Vec<ForwardTrace>> {
    use rayon::prelude::*;
    (0..batch.batch_size())
        .into_par_iter()
        .map(|bi| {
            let x = batch.activations.index_axis(Axis(0), bi).to_owned();
            let mask: Vec<bool> = batch.mask.row(bi).to_vec();
            forward_masked(x.view(), &mask, params, training, sample_seed(base_seed, bi as u64))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_k: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_v: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w_q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w_k: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w_v: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w_o: Option<Vec<Vec<f64>>>,
    norm_scale: Vec<f64>,
    norm_shift: Vec<f64>,
    ffn_w1: Vec<f64>,
    ffn_b1: Vec<f64>,
    ffn_w2: Vec<f64>,
    ffn_b2: Vec<f64>,
}

/// Self-describing checkpoint document. Loading rejects unknown fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: String,
    pub heads: usize,
    pub tau: f64,
    pub residual: bool,
    pub affine_enabled: bool,
    pub nonneg_w: bool,
    pub lse_normalized: bool,
    pub dropout_rate: f64,
    pub concept_names: Vec<String>,
    pub class_names: Vec<String>,
    pub config_hash: String,
    blocks: Vec<CheckpointBlock>,
    gamma: Vec<f64>,
    delta: Vec<f64>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Input(format!("checkpoint field {what} is empty")));
    }
    let cols = rows[0].len();
    let mut m = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Input(format!(
                "checkpoint field {what} row {i} has ragged width"
            )));
        }
        for (j, &v) in r.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

impl Checkpoint {
    pub fn from_params(
        params: &ModelParams,
        concept_names: &[String],
        class_names: &[String],
        config_hash: &str,
    ) -> Self {
        let blocks = params
            .blocks
            .iter()
            .map(|blk| {
                let mut cb = CheckpointBlock {
                    theta_q: None,
                    theta_k: None,
                    theta_v: None,
                    w_q: None,
                    w_k: None,
                    w_v: None,
                    w_o: None,
                    norm_scale: blk.norm_scale.to_vec(),
                    norm_shift: blk.norm_shift.to_vec(),
                    ffn_w1: blk.ffn_w1.to_vec(),
                    ffn_b1: blk.ffn_b1.to_vec(),
                    ffn_w2: blk.ffn_w2.to_vec(),
                    ffn_b2: blk.ffn_b2.to_vec(),
                };
                match &blk.attn {
                    AttnParams::Diagonal { theta_q, theta_k, theta_v } => {
                        cb.theta_q = Some(theta_q.to_vec());
                        cb.theta_k = Some(theta_k.to_vec());
                        cb.theta_v = Some(theta_v.to_vec());
                    }
                    AttnParams::Full(fa) => {
                        cb.w_q = Some(matrix_to_rows(&fa.w_q));
                        cb.w_k = Some(matrix_to_rows(&fa.w_k));
                        cb.w_v = Some(matrix_to_rows(&fa.w_v));
                        cb.w_o = Some(matrix_to_rows(&fa.w_o));
                    }
                }
                cb
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            variant: params.variant().to_string(),
            heads: params.heads(),
            tau: params.tau,
            residual: params.residual,
            affine_enabled: params.affine_enabled,
            nonneg_w: params.nonneg_w,
            lse_normalized: params.lse_normalized,
            dropout_rate: params.dropout_rate,
            concept_names: concept_names.to_vec(),
            class_names: class_names.to_vec(),
            config_hash: config_hash.to_string(),
            blocks,
            gamma: params.gamma.to_vec(),
            delta: params.delta.to_vec(),
            w: matrix_to_rows(&params.w),
            b: params.b.to_vec(),
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        let variant: Variant = self.variant.parse()?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, cb) in self.blocks.iter().enumerate() {
            let attn = match variant {
                Variant::Diagonal => {
                    let (tq, tk, tv) = match (&cb.theta_q, &cb.theta_k, &cb.theta_v) {
                        (Some(q), Some(k), Some(v)) => (q, k, v),
                        _ => {
                            return Err(Error::Input(format!(
                                "diagonal checkpoint block {i} is missing theta fields"
                            )))
                        }
                    };
                    AttnParams::Diagonal {
                        theta_q: Array1::from_vec(tq.clone()),
                        theta_k: Array1::from_vec(tk.clone()),
                        theta_v: Array1::from_vec(tv.clone()),
                    }
                }
                Variant::Full => {
                    let (wq, wk, wv, wo) = match (&cb.w_q, &cb.w_k, &cb.w_v, &cb.w_o) {
                        (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                        _ => {
                            return Err(Error::Input(format!(
                                "full checkpoint block {i} is missing projection matrices"
                            )))
                        }
                    };
                    AttnParams::Full(FullAttn {
                        w_q: rows_to_matrix(wq, "w_q")?,
                        w_k: rows_to_matrix(wk, "w_k")?,
                        w_v: rows_to_matrix(wv, "w_v")?,
                        w_o: rows_to_matrix(wo, "w_o")?,
                        heads: self.heads,
                    })
                }
            };
            blocks.push(BlockParams {
                attn,
                norm_scale: Array1::from_vec(cb.norm_scale.clone()),
                norm_shift: Array1::from_vec(cb.norm_shift.clone()),
                ffn_w1: Array1::from_vec(cb.ffn_w1.clone()),
                ffn_b1: Array1::from_vec(cb.ffn_b1.clone()),
                ffn_w2: Array1::from_vec(cb.ffn_w2.clone()),
                ffn_b2: Array1::from_vec(cb.ffn_b2.clone()),
            });
        }
        let params = ModelParams {
            blocks,
            gamma: Array1::from_vec(self.gamma),
            delta: Array1::from_vec(self.delta),
            affine_enabled: self.affine_enabled,
            w: rows_to_matrix(&self.w, "w")?,
            b: Array1::from_vec(self.b),
            tau: self.tau,
            residual: self.residual,
            nonneg_w: self.nonneg_w,
            lse_normalized: self.lse_normalized,
            dropout_rate: self.dropout_rate,
        };
        params.validate()?;
        if params.concepts() != self.concept_names.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} concept names but C = {}",
                self.concept_names.len(),
                params.concepts()
            )));
        }
        if params.classes() != self.class_names.len() {
            return Err(Error::Input(format!(
                "checkpoint has {} class names but K = {}",
                self.class_names.len(),
                params.classes()
            )));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(
    params: &ModelParams,
    concept_names: &[String],
    class_names: &[String],
    config_hash: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let doc = Checkpoint::from_params(params, concept_names, class_names, config_hash);
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, Checkpoint)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let doc: Checkpoint = serde_json::from_str(&text).map_err(|e| {
        Error::Input(format!(
            "checkpoint {}: {e}",
            path.as_ref().display()
        ))
    })?;
    let params = doc.clone().into_params()?;
    Ok((params, doc))
}
