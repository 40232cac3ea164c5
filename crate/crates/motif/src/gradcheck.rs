//! Central finite-difference verification of the analytic gradients.
//!
//! The oracle here is deliberately independent of the backward pass: it only
//! ever calls the forward-mode objective on perturbed copies of the
//! parameters. Training-critical code must never call into this module; it
//! exists for tests and the acceptance suite.

use crate::data::PaddedBatch;
use crate::error::{Error, Result};
use crate::grad::{batch_loss, Penalties};
use crate::model::ModelParams;

/// Central finite differences of a scalar function at `point`.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let plus = f(&x);
        x[i] = point[i] - step;
        let minus = f(&x);
        x[i] = point[i];
        grads.push((plus - minus) / (2.0 * step));
    }
    grads
}

/// One parameter whose analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    /// Span name plus index, e.g. `block0.theta_q[2]`.
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Verify every parameter gradient of the objective on `batch` against
/// central finite differences (step `step`, in double precision).
///
/// A parameter passes when `|a - n| <= atol + rtol * max(|a|, |n|)`.
/// Requires `dropout_rate == 0` so the objective is smooth.
pub fn check_gradients(
    batch: &PaddedBatch,
    params: &ModelParams,
    class_weights: &[f64],
    penalties: Penalties,
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<GradCheckReport> {
    if params.dropout_rate != 0.0 {
        return Err(Error::Config(
            "gradient checking requires dropout_rate = 0".into(),
        ));
    }
    let (_, grads) = batch_loss(batch, params, class_weights, penalties, true, 0, true)?;
    let analytic = grads.unwrap().to_flat();
    let flat = params.to_flat();
    let layout = params.layout();

    let mut scratch = params.clone();
    let numeric = finite_diff_grad(
        |theta: &[f64]| {
            scratch.set_from_flat(theta);
            let (decomp, _) =
                batch_loss(batch, &scratch, class_weights, penalties, true, 0, false)
                    .expect("objective evaluation failed during finite differences");
            decomp.total()
        },
        &flat,
        step,
    );

    let name_of = |i: usize| -> String {
        for span in &layout.spans {
            if i >= span.offset && i < span.offset + span.len {
                return format!("{}[{}]", span.name, i - span.offset);
            }
        }
        format!("param[{i}]")
    };

    let mut mismatches = Vec::new();
    let mut max_rel: f64 = 0.0;
    for i in 0..flat.len() {
        let (a, n) = (analytic[i], numeric[i]);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
        max_rel = max_rel.max(rel);
        if (a - n).abs() > atol + rtol * a.abs().max(n.abs()) {
            mismatches.push(GradMismatch { param: name_of(i), analytic: a, numeric: n });
        }
    }
    Ok(GradCheckReport { checked: flat.len(), max_rel_err: max_rel, mismatches })
}

/// Spec tolerances: step 1e-5, relative error 1e-5, absolute floor 1e-8.
pub fn check_gradients_default(
    batch: &PaddedBatch,
    params: &ModelParams,
    class_weights: &[f64],
    penalties: Penalties,
) -> Result<GradCheckReport> {
    check_gradients(batch, params, class_weights, penalties, 1e-5, 1e-5, 1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pad_batch, ConceptSequence};
    use crate::model::{
        forward, init_params, AttnParams, ModelConfig, Variant,
    };
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(
        rng: &mut ChaCha8Rng,
        b: usize,
        t_max: usize,
        c: usize,
        k: usize,
        ragged: bool,
    ) -> PaddedBatch {
        let samples: Vec<ConceptSequence> = (0..b)
            .map(|i| {
                let t = if ragged { 1 + (i % t_max.max(1)) } else { t_max };
                let m = Array2::from_shape_fn((t.max(1), c), |_| {
                    let v: f64 = StandardNormal.sample(rng);
                    v
                });
                ConceptSequence::new(format!("s{i}"), i % k, m).unwrap()
            })
            .collect();
        pad_batch(&samples).unwrap()
    }

    fn perturb(params: &mut crate::model::ModelParams, rng: &mut ChaCha8Rng) {
        // move away from the near-identity init so every path is generic
        let mut flat = params.to_flat();
        for v in flat.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.3 * n;
        }
        params.set_from_flat(&flat);
        if params.nonneg_w {
            params.w.mapv_inplace(|v| v.max(0.0));
        }
    }

    fn run_check(cfg: ModelConfig, c: usize, k: usize, ragged: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(c, k, &cfg, seed).unwrap();
        perturb(&mut params, &mut rng);
        let batch = random_batch(&mut rng, 2, 5, c, k, ragged);
        let weights: Vec<f64> = (0..k).map(|i| 0.5 + 0.5 * i as f64).collect();
        let pen = Penalties { lambda_l1: 1e-3, lambda_sparse: 1e-3 };
        let report = check_gradients_default(&batch, &params, &weights, pen).unwrap();
        assert!(
            report.ok(),
            "gradient mismatches ({} params, max rel {:.3e}): {:?}",
            report.checked,
            report.max_rel_err,
            &report.mismatches[..report.mismatches.len().min(5)]
        );
    }

    #[test]
    fn diagonal_gradients_match_finite_differences() {
        let cfg = ModelConfig { dropout_rate: 0.0, nonneg_w: false, ..Default::default() };
        run_check(cfg, 4, 3, true, 11);
    }

    #[test]
    fn diagonal_without_affine_matches() {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            nonneg_w: false,
            affine: false,
            ..Default::default()
        };
        run_check(cfg, 4, 3, true, 12);
    }

    #[test]
    fn diagonal_without_residual_matches() {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            nonneg_w: false,
            residual: false,
            ..Default::default()
        };
        run_check(cfg, 3, 2, false, 13);
    }

    #[test]
    fn full_variant_matches() {
        let cfg = ModelConfig {
            variant: Variant::Full,
            heads: 2,
            dropout_rate: 0.0,
            nonneg_w: false,
            ..Default::default()
        };
        run_check(cfg, 4, 3, true, 14);
    }

    #[test]
    fn depth_two_matches() {
        let cfg = ModelConfig { depth: 2, dropout_rate: 0.0, nonneg_w: false, ..Default::default() };
        run_check(cfg, 3, 2, true, 15);
    }

    #[test]
    fn clamped_nonneg_classifier_matches() {
        // exact zeros in W exercise the sign(0) = 0 subgradient
        let cfg = ModelConfig { dropout_rate: 0.0, nonneg_w: true, ..Default::default() };
        run_check(cfg, 4, 3, false, 16);
    }

    #[test]
    fn unnormalized_lse_matches() {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            nonneg_w: false,
            lse_normalized: false,
            ..Default::default()
        };
        run_check(cfg, 3, 3, true, 17);
    }

    #[test]
    fn theta_v_gradient_vanishes_for_zero_channel() {
        // channel 1 input identically zero, shift 0: its normed values stay 0,
        // so V is 0 and the theta_v path carries no gradient
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            nonneg_w: false,
            residual: false,
            affine: false,
            ..Default::default()
        };
        let mut params = init_params(2, 2, &cfg, 3).unwrap();
        params.blocks[0].ffn_w2.fill(0.0); // keep the FFN from re-adding signal
        let mut x = Array2::zeros((3, 2));
        for t in 0..3 {
            x[[t, 0]] = 0.5 + t as f64;
        }
        let sample = ConceptSequence::new("s", 0, x).unwrap();
        let batch = pad_batch(&[sample]).unwrap();
        let pen = Penalties { lambda_l1: 0.0, lambda_sparse: 0.0 };
        let (_, grads) =
            batch_loss(&batch, &params, &[1.0, 1.0], pen, true, 0, true).unwrap();
        let grads = grads.unwrap();
        if let crate::grad::AttnGrads::Diagonal { theta_v, .. } = &grads.blocks[0].attn {
            assert_eq!(theta_v[1], 0.0);
        } else {
            panic!("expected diagonal gradients");
        }
        let report = check_gradients_default(&batch, &params, &[1.0, 1.0], pen).unwrap();
        assert!(report.ok(), "{:?}", report.mismatches.first());
    }

    #[test]
    fn bias_gradient_closed_form_at_single_step() {
        // with T = 1 pooling is the identity, so d ce / d b_k has the
        // classic softmax - onehot form (batch mean, class weighted)
        let cfg = ModelConfig { dropout_rate: 0.0, nonneg_w: false, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = init_params(3, 3, &cfg, 21).unwrap();
        perturb(&mut params, &mut rng);
        let batch = random_batch(&mut rng, 2, 1, 3, 3, false);
        let weights = [1.0, 0.5, 2.0];
        let pen = Penalties { lambda_l1: 0.0, lambda_sparse: 0.0 };
        let (_, grads) =
            batch_loss(&batch, &params, &weights, pen, true, 0, true).unwrap();
        let grads = grads.unwrap();
        let mut expect = Array1::<f64>::zeros(3);
        for bi in 0..2 {
            let x = batch.activations.index_axis(ndarray::Axis(0), bi).to_owned();
            let s = ConceptSequence::new("t", batch.labels[bi], x).unwrap();
            let trace = forward(&s, &params, false, 0).unwrap();
            let pooled = &trace.pooled_logits;
            let max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + pooled.mapv(|v| (v - max).exp()).sum().ln();
            let wy = weights[batch.labels[bi]];
            for k in 0..3 {
                let p = (pooled[k] - lse).exp();
                let ind = if k == batch.labels[bi] { 1.0 } else { 0.0 };
                expect[k] += wy * (p - ind) / 2.0;
            }
        }
        for k in 0..3 {
            approx::assert_relative_eq!(grads.b[k], expect[k], max_relative = 1e-9);
        }
    }

    #[test]
    fn masked_and_unmasked_batches_both_check() {
        let cfg = ModelConfig { dropout_rate: 0.0, nonneg_w: false, ..Default::default() };
        run_check(cfg.clone(), 4, 4, false, 31); // masks all ones
        run_check(cfg, 4, 4, true, 32); // ragged lengths -> real padding
    }

    #[test]
    fn rejects_dropout_in_checking_mode() {
        let cfg = ModelConfig { dropout_rate: 0.1, ..Default::default() };
        let params = init_params(2, 2, &cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 1, 2, 2, 2, false);
        let pen = Penalties { lambda_l1: 0.0, lambda_sparse: 0.0 };
        assert!(check_gradients_default(&batch, &params, &[1.0, 1.0], pen).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = finite_diff_grad(f, &[2.0, -1.0], 1e-6);
        approx::assert_relative_eq!(g[0], 1.0, max_relative = 1e-7);
        approx::assert_relative_eq!(g[1], 6.0, max_relative = 1e-7);
    }

    // silence unused-import warnings for items only used in some cfgs
    #[allow(dead_code)]
    fn _touch(p: &AttnParams) -> Variant {
        p.variant()
    }
}
