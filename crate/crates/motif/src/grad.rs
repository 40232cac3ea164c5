//! Reverse-mode gradients of the training objective with respect to every
//! learnable tensor, derived by hand layer by layer: masked LSE pooling,
//! linear head, Softplus bottleneck (with the optional per-concept affine),
//! the feed-forward with GELU and dropout, the shared per-channel norm, and
//! both attention variants.
//!
//! Everything here is verified against central finite differences (see
//! [`crate::gradcheck`] and the acceptance suite).

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::model::{
    forward_with_stash, gelu_prime, sample_seed, sigmoid, AttnCache, AttnParams, BlockCache,
    ForwardStash, ForwardTrace, FullAttn, ModelParams, NormCache,
};

/// Gradients of one block's parameters.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub attn: AttnGrads,
    pub norm_scale: Array1<f64>,
    pub norm_shift: Array1<f64>,
    pub ffn_w1: Array1<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array1<f64>,
    pub ffn_b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub enum AttnGrads {
    Diagonal {
        theta_q: Array1<f64>,
        theta_k: Array1<f64>,
        theta_v: Array1<f64>,
    },
    Full {
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Array2<f64>,
    },
}

/// Gradient set matching every learnable field of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub gamma: Array1<f64>,
    pub delta: Array1<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let c = params.concepts();
        let blocks = params
            .blocks
            .iter()
            .map(|blk| BlockGrads {
                attn: match &blk.attn {
                    AttnParams::Diagonal { .. } => AttnGrads::Diagonal {
                        theta_q: Array1::zeros(c),
                        theta_k: Array1::zeros(c),
                        theta_v: Array1::zeros(c),
                    },
                    AttnParams::Full(_) => AttnGrads::Full {
                        w_q: Array2::zeros((c, c)),
                        w_k: Array2::zeros((c, c)),
                        w_v: Array2::zeros((c, c)),
                        w_o: Array2::zeros((c, c)),
                    },
                },
                norm_scale: Array1::zeros(c),
                norm_shift: Array1::zeros(c),
                ffn_w1: Array1::zeros(c),
                ffn_b1: Array1::zeros(c),
                ffn_w2: Array1::zeros(c),
                ffn_b2: Array1::zeros(c),
            })
            .collect();
        Gradients {
            blocks,
            gamma: Array1::zeros(c),
            delta: Array1::zeros(c),
            w: Array2::zeros(params.w.raw_dim()),
            b: Array1::zeros(params.b.len()),
        }
    }

    /// Flatten in the same order as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for blk in &self.blocks {
            match &blk.attn {
                AttnGrads::Diagonal { theta_q, theta_k, theta_v } => {
                    out.extend(theta_q.iter());
                    out.extend(theta_k.iter());
                    out.extend(theta_v.iter());
                }
                AttnGrads::Full { w_q, w_k, w_v, w_o } => {
                    out.extend(w_q.iter());
                    out.extend(w_k.iter());
                    out.extend(w_v.iter());
                    out.extend(w_o.iter());
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

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            match (&mut a.attn, &b.attn) {
                (
                    AttnGrads::Diagonal { theta_q, theta_k, theta_v },
                    AttnGrads::Diagonal { theta_q: q2, theta_k: k2, theta_v: v2 },
                ) => {
                    *theta_q += q2;
                    *theta_k += k2;
                    *theta_v += v2;
                }
                (
                    AttnGrads::Full { w_q, w_k, w_v, w_o },
                    AttnGrads::Full { w_q: q2, w_k: k2, w_v: v2, w_o: o2 },
                ) => {
                    *w_q += q2;
                    *w_k += k2;
                    *w_v += v2;
                    *w_o += o2;
                }
                _ => unreachable!("mismatched gradient variants"),
            }
            a.norm_scale += &b.norm_scale;
            a.norm_shift += &b.norm_shift;
            a.ffn_w1 += &b.ffn_w1;
            a.ffn_b1 += &b.ffn_b1;
            a.ffn_w2 += &b.ffn_w2;
            a.ffn_b2 += &b.ffn_b2;
        }
        self.gamma += &other.gamma;
        self.delta += &other.delta;
        self.w += &other.w;
        self.b += &other.b;
    }
}

/// Additive decomposition of the objective; the pieces sum to the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossDecomp {
    /// Class-weighted cross-entropy, averaged over the batch.
    pub ce: f64,
    /// `lambda_l1 * sum |W|` (classifier weights only, bias excluded).
    pub l1: f64,
    /// Masked mean of `|Z|` per sample, scaled by `lambda_sparse`, batch-averaged.
    pub sparse: f64,
}

impl LossDecomp {
    pub fn total(&self) -> f64 {
        self.ce + self.l1 + self.sparse
    }
}

/// Regularization strengths of the objective.
#[derive(Debug, Clone, Copy)]
pub struct Penalties {
    pub lambda_l1: f64,
    pub lambda_sparse: f64,
}

fn check_batch(batch: &PaddedBatch, params: &ModelParams, weights: &[f64]) -> Result<()> {
    if batch.batch_size() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if weights.len() != params.classes() {
        return Err(Error::Input(format!(
            "{} class weights for K = {}",
            weights.len(),
            params.classes()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Input("class weights must be >= 0".into()));
    }
    for &l in &batch.labels {
        if l >= params.classes() {
            return Err(Error::Input(format!(
                "label {l} out of range [0, {})",
                params.classes()
            )));
        }
    }
    Ok(())
}

struct SampleBackward {
    weighted_ce: f64,
    sparse_raw: f64,
    grads: Option<Gradients>,
}

/// Cross-entropy of one pooled logit vector plus its gradient.
fn ce_and_dlogits(pooled: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + pooled.mapv(|v| (v - max).exp()).sum().ln();
    let ce = lse - pooled[label];
    let mut d = pooled.mapv(|v| (v - lse).exp());
    d[label] -= 1.0;
    (ce, d)
}

/// Softmax weights of the masked LSE pool per column. Both the normalized
/// and raw forms share this derivative (the `1/n` cancels).
fn lse_weights(values: &Array2<f64>, n: usize, tau: f64, col: usize) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for t in 0..n {
        if values[[t, col]] > max {
            max = values[[t, col]];
        }
    }
    let mut w: Vec<f64> = (0..n).map(|t| (tau * (values[[t, col]] - max)).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn masked_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    scale: &Array1<f64>,
    n: usize,
    dscale: &mut Array1<f64>,
    dshift: &mut Array1<f64>,
) -> Array2<f64> {
    let (t_len, c_len) = dy.dim();
    let mut dx = Array2::zeros((t_len, c_len));
    for c in 0..c_len {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for t in 0..n {
            sum_dy += dy[[t, c]];
            sum_dy_xhat += dy[[t, c]] * cache.xhat[[t, c]];
        }
        dscale[c] += sum_dy_xhat;
        dshift[c] += sum_dy;
        let coef = scale[c] * cache.inv_std[c];
        let nf = n as f64;
        for t in 0..n {
            dx[[t, c]] =
                coef * (dy[[t, c]] - sum_dy / nf - cache.xhat[[t, c]] * sum_dy_xhat / nf);
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn diagonal_attention_backward(
    attn_in: &Array2<f64>,
    attn_weights: &ndarray::Array3<f64>,
    theta_q: &Array1<f64>,
    theta_k: &Array1<f64>,
    theta_v: &Array1<f64>,
    d_out: &Array2<f64>,
    n: usize,
    g_q: &mut Array1<f64>,
    g_k: &mut Array1<f64>,
    g_v: &mut Array1<f64>,
) -> Array2<f64> {
    let (t_len, c_len) = attn_in.dim();
    let mut dx = Array2::zeros((t_len, c_len));
    for c in 0..c_len {
        let x: Vec<f64> = (0..n).map(|t| attn_in[[t, c]]).collect();
        let q: Vec<f64> = x.iter().map(|&v| theta_q[c] * v).collect();
        let k: Vec<f64> = x.iter().map(|&v| theta_k[c] * v).collect();
        let v: Vec<f64> = x.iter().map(|&v| theta_v[c] * v).collect();
        let dy: Vec<f64> = (0..n).map(|t| d_out[[t, c]]).collect();

        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        for t in 0..n {
            // softmax row backward: ds = a .* (da - <a, da>)
            let mut dot = 0.0;
            for u in 0..n {
                dot += attn_weights[[c, t, u]] * dy[t] * v[u];
            }
            for u in 0..n {
                let a = attn_weights[[c, t, u]];
                let da = dy[t] * v[u];
                let ds = a * (da - dot);
                dq[t] += ds * k[u];
                dk[u] += ds * q[t];
                dv[u] += a * dy[t];
            }
        }
        let mut gq = 0.0;
        let mut gk = 0.0;
        let mut gv = 0.0;
        for t in 0..n {
            gq += dq[t] * x[t];
            gk += dk[t] * x[t];
            gv += dv[t] * x[t];
            dx[[t, c]] = theta_q[c] * dq[t] + theta_k[c] * dk[t] + theta_v[c] * dv[t];
        }
        g_q[c] += gq;
        g_k[c] += gk;
        g_v[c] += gv;
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn full_attention_backward(
    attn_in: &Array2<f64>,
    cache_q: &Array2<f64>,
    cache_k: &Array2<f64>,
    cache_v: &Array2<f64>,
    concat: &Array2<f64>,
    attn_weights: &ndarray::Array3<f64>,
    fa: &FullAttn,
    d_out: &Array2<f64>,
    n: usize,
    g_wq: &mut Array2<f64>,
    g_wk: &mut Array2<f64>,
    g_wv: &mut Array2<f64>,
    g_wo: &mut Array2<f64>,
) -> Array2<f64> {
    let (t_len, c_len) = attn_in.dim();
    let head_dim = c_len / fa.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let _ = t_len;
    // d_out rows at masked t are zero, so whole-matrix products are safe
    let d_concat = d_out.dot(&fa.w_o.t());
    *g_wo += &concat.t().dot(d_out);
    let mut dq = Array2::zeros(attn_in.raw_dim());
    let mut dk = Array2::zeros(attn_in.raw_dim());
    let mut dv = Array2::zeros(attn_in.raw_dim());
    for h in 0..fa.heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        for t in 0..n {
            let mut da = vec![0.0; n];
            let mut dot = 0.0;
            for u in 0..n {
                let mut acc = 0.0;
                for d in lo..hi {
                    acc += d_concat[[t, d]] * cache_v[[u, d]];
                }
                da[u] = acc;
                dot += attn_weights[[h, t, u]] * acc;
            }
            for u in 0..n {
                let a = attn_weights[[h, t, u]];
                let ds = a * (da[u] - dot) * scale;
                for d in lo..hi {
                    dq[[t, d]] += ds * cache_k[[u, d]];
                    dk[[u, d]] += ds * cache_q[[t, d]];
                    dv[[u, d]] += a * d_concat[[t, d]];
                }
            }
        }
    }
    *g_wq += &attn_in.t().dot(&dq);
    *g_wk += &attn_in.t().dot(&dk);
    *g_wv += &attn_in.t().dot(&dv);
    dq.dot(&fa.w_q.t()) + dk.dot(&fa.w_k.t()) + dv.dot(&fa.w_v.t())
}

fn block_backward(
    blk_params: &crate::model::BlockParams,
    cache: &BlockCache,
    residual: bool,
    n: usize,
    d_output: &Array2<f64>,
    grads: &mut BlockGrads,
) -> Array2<f64> {
    let (t_len, c_len) = d_output.dim();
    // feed-forward sub-layer
    let mut d_n2 = Array2::zeros((t_len, c_len));
    for t in 0..n {
        for c in 0..c_len {
            let df = d_output[[t, c]];
            if df == 0.0 {
                continue;
            }
            let dm = cache.drop_mask.as_ref().map_or(1.0, |m| m[[t, c]]);
            let hidden = cache.ffn_g[[t, c]] * dm;
            grads.ffn_w2[c] += df * hidden;
            grads.ffn_b2[c] += df;
            let dg = df * blk_params.ffn_w2[c] * dm;
            let du = dg * gelu_prime(cache.ffn_u[[t, c]]);
            grads.ffn_w1[c] += du * cache.n2[[t, c]];
            grads.ffn_b1[c] += du;
            d_n2[[t, c]] = du * blk_params.ffn_w1[c];
        }
    }
    let d_x1_from_norm = masked_norm_backward(
        &d_n2,
        &cache.norm2,
        &blk_params.norm_scale,
        n,
        &mut grads.norm_scale,
        &mut grads.norm_shift,
    );
    let d_x1 = if residual {
        d_output + &d_x1_from_norm
    } else {
        d_x1_from_norm
    };
    // attention sub-layer: output rows at masked t were zeroed in the forward
    let mut d_attn_out = d_x1.clone();
    for t in n..t_len {
        d_attn_out.row_mut(t).fill(0.0);
    }
    let d_attn_in = match (&blk_params.attn, &cache.attn_cache, &mut grads.attn) {
        (
            AttnParams::Diagonal { theta_q, theta_k, theta_v },
            AttnCache::Diagonal,
            AttnGrads::Diagonal { theta_q: gq, theta_k: gk, theta_v: gv },
        ) => diagonal_attention_backward(
            &cache.attn_in,
            &cache.attn_weights,
            theta_q,
            theta_k,
            theta_v,
            &d_attn_out,
            n,
            gq,
            gk,
            gv,
        ),
        (
            AttnParams::Full(fa),
            AttnCache::Full { q, k, v, concat },
            AttnGrads::Full { w_q, w_k, w_v, w_o },
        ) => full_attention_backward(
            &cache.attn_in,
            q,
            k,
            v,
            concat,
            &cache.attn_weights,
            fa,
            &d_attn_out,
            n,
            w_q,
            w_k,
            w_v,
            w_o,
        ),
        _ => unreachable!("mismatched attention cache"),
    };
    if residual {
        let d_input_from_norm1 = masked_norm_backward(
            &d_attn_in,
            cache.norm1.as_ref().unwrap(),
            &blk_params.norm_scale,
            n,
            &mut grads.norm_scale,
            &mut grads.norm_shift,
        );
        d_x1 + &d_input_from_norm1
    } else {
        d_attn_in
    }
}

/// Backward pass of one sample given the upstream gradient on the pooled
/// logits and the per-step sparsity coefficient.
fn sample_backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    stash: &ForwardStash,
    d_pooled: &Array1<f64>,
    sparse_coef: f64,
    grads: &mut Gradients,
) {
    let n = stash.n;
    let (t_len, c_len) = trace.z.dim();
    let k_len = params.classes();
    // pooled logits -> per-time logits
    let mut d_logits = Array2::zeros((t_len, k_len));
    for k in 0..k_len {
        if d_pooled[k] == 0.0 {
            continue;
        }
        let w = lse_weights(&trace.logits_t, n, params.tau, k);
        for t in 0..n {
            d_logits[[t, k]] = d_pooled[k] * w[t];
        }
    }
    // linear head
    let mut d_z = Array2::<f64>::zeros((t_len, c_len));
    for t in 0..n {
        for k in 0..k_len {
            let dl = d_logits[[t, k]];
            if dl == 0.0 {
                continue;
            }
            grads.b[k] += dl;
            for c in 0..c_len {
                grads.w[[k, c]] += dl * trace.z[[t, c]];
                d_z[[t, c]] += dl * params.w[[k, c]];
            }
        }
    }
    // activation sparsity: Z > 0 everywhere (Softplus range), so d|Z| = 1
    if sparse_coef != 0.0 {
        for t in 0..n {
            for c in 0..c_len {
                d_z[[t, c]] += sparse_coef;
            }
        }
    }
    // Softplus and the optional affine
    let mut d_xl = Array2::zeros((t_len, c_len));
    for t in 0..n {
        for c in 0..c_len {
            let ds = d_z[[t, c]] * sigmoid(stash.pre_softplus[[t, c]]);
            if params.affine_enabled {
                grads.gamma[c] += ds * trace.x_l[[t, c]];
                grads.delta[c] += ds;
                d_xl[[t, c]] = ds * params.gamma[c];
            } else {
                d_xl[[t, c]] = ds;
            }
        }
    }
    // blocks, last to first
    let mut d_current = d_xl;
    for (blk_params, (cache, blk_grads)) in params
        .blocks
        .iter()
        .zip(stash.blocks.iter().zip(grads.blocks.iter_mut()))
        .rev()
    {
        d_current = block_backward(blk_params, cache, params.residual, n, &d_current, blk_grads);
    }
}

fn param_norm_diagnostics(params: &ModelParams) -> String {
    let flat = params.to_flat();
    let l2 = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let max = flat.iter().cloned().fold(0.0_f64, |a, v| a.max(v.abs()));
    format!("|params|_2 = {l2:.6e}, max|param| = {max:.6e}")
}

/// Evaluate the objective and, optionally, its gradients over a batch.
///
/// `dropout_seed` drives the per-sample dropout streams in training mode;
/// evaluation mode (`training = false`) is deterministic regardless.
pub fn batch_loss(
    batch: &PaddedBatch,
    params: &ModelParams,
    class_weights: &[f64],
    penalties: Penalties,
    training: bool,
    dropout_seed: u64,
    want_grads: bool,
) -> Result<(LossDecomp, Option<Gradients>)> {
    check_batch(batch, params, class_weights)?;
    let b_len = batch.batch_size();
    let b_f = b_len as f64;
    let per_sample: Vec<SampleBackward> = (0..b_len)
        .into_par_iter()
        .map(|bi| -> Result<SampleBackward> {
            let x = batch.activations.index_axis(Axis(0), bi).to_owned();
            let mask: Vec<bool> = batch.mask.row(bi).to_vec();
            let seed = sample_seed(dropout_seed, bi as u64);
            let (trace, stash) = forward_with_stash(&x, &mask, params, training, seed)?;
            let label = batch.labels[bi];
            let wy = class_weights[label];
            let (ce, mut d_pooled) = ce_and_dlogits(&trace.pooled_logits, label);
            let n = stash.n;
            let c_len = params.concepts();
            let mut sparse_raw = 0.0;
            for t in 0..n {
                for c in 0..c_len {
                    sparse_raw += trace.z[[t, c]].abs();
                }
            }
            sparse_raw /= (n * c_len) as f64;
            let grads = if want_grads {
                let mut g = Gradients::zeros_like(params);
                d_pooled.mapv_inplace(|v| v * wy / b_f);
                let sparse_coef = penalties.lambda_sparse / (b_f * (n * c_len) as f64);
                sample_backward(params, &trace, &stash, &d_pooled, sparse_coef, &mut g);
                Some(g)
            } else {
                None
            };
            Ok(SampleBackward { weighted_ce: wy * ce, sparse_raw, grads })
        })
        .collect::<Result<Vec<_>>>()?;

    let ce = per_sample.iter().map(|s| s.weighted_ce).sum::<f64>() / b_f;
    let sparse =
        penalties.lambda_sparse * per_sample.iter().map(|s| s.sparse_raw).sum::<f64>() / b_f;
    let l1 = penalties.lambda_l1 * params.w.iter().map(|v| v.abs()).sum::<f64>();
    let decomp = LossDecomp { ce, l1, sparse };
    if !decomp.total().is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (ce = {ce:.6e}, l1 = {l1:.6e}, sparse = {sparse:.6e}); {}",
            param_norm_diagnostics(params)
        )));
    }
    let grads = if want_grads {
        // fixed-order reduction keeps parallel and serial runs bit-identical
        let mut total = Gradients::zeros_like(params);
        for s in &per_sample {
            total.add_assign(s.grads.as_ref().unwrap());
        }
        // L1 subgradient on the classifier weights, sign(0) = 0
        for (g, &w) in total.w.iter_mut().zip(params.w.iter()) {
            if w != 0.0 {
                *g += penalties.lambda_l1 * w.signum();
            }
        }
        Some(total)
    } else {
        None
    };
    Ok((decomp, grads))
}
