//! Training: the regularized objective, AdamW with decoupled weight decay
//! and optional nonnegativity projection of the classifier, the epoch loop,
//! evaluation, and the mean-pooled linear-probe baseline.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_weights, pad_batch, ConceptSequence, PaddedBatch};
use crate::error::{Error, Result};
use crate::grad::{batch_loss, Gradients, LossDecomp, Penalties};
use crate::model::{
    argmax, forward, init_params, sample_seed, ModelConfig, ModelParams, Variant,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_tau() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}
fn default_seed() -> u64 {
    42
}
fn default_variant() -> String {
    "diagonal".into()
}
fn default_heads() -> usize {
    4
}
fn default_depth() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.1
}

/// Training configuration; the serde defaults are the baseline hyperparameters
/// (100 epochs, batch 32, AdamW at lr 1e-3 / weight decay 1e-2, tau 1.0, both
/// penalties 1e-3, nonnegative classifier, seed 42). Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lambda_l1: f64,
    #[serde(default = "default_lambda")]
    pub lambda_sparse: f64,
    #[serde(default = "default_true")]
    pub nonneg_w: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default = "default_true")]
    pub affine: bool,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_true")]
    pub lse_normalized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(self.lambda_l1 >= 0.0) || !(self.lambda_sparse >= 0.0) {
            return Err(Error::Config("penalties must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        let _: Variant = self.variant.parse()?;
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.validate()?;
        Ok(ModelConfig {
            variant: self.variant.parse()?,
            heads: self.heads,
            depth: self.depth,
            tau: self.tau,
            residual: self.residual,
            affine: self.affine,
            nonneg_w: self.nonneg_w,
            lse_normalized: self.lse_normalized,
            dropout_rate: self.dropout_rate,
        })
    }

    pub fn penalties(&self) -> Penalties {
        Penalties { lambda_l1: self.lambda_l1, lambda_sparse: self.lambda_sparse }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Eq.-style objective over one padded batch: class-weighted cross-entropy on
/// the pooled logits plus the L1 and activation-sparsity penalties.
pub fn loss(
    batch: &PaddedBatch,
    params: &ModelParams,
    weights: &[f64],
    penalties: Penalties,
    training: bool,
    dropout_seed: u64,
) -> Result<(f64, LossDecomp)> {
    let (decomp, _) = batch_loss(batch, params, weights, penalties, training, dropout_seed, false)?;
    Ok((decomp.total(), decomp))
}

/// Exact reverse-mode gradients of [`loss`] for every parameter tensor.
pub fn gradients(
    batch: &PaddedBatch,
    params: &ModelParams,
    weights: &[f64],
    penalties: Penalties,
    dropout_seed: u64,
) -> Result<(f64, LossDecomp, Gradients)> {
    let (decomp, grads) =
        batch_loss(batch, params, weights, penalties, true, dropout_seed, true)?;
    Ok((decomp.total(), decomp, grads.unwrap()))
}

/// First and second moment estimates, one slot per flattened parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(total_params: usize) -> Self {
        Self { m: vec![0.0; total_params], v: vec![0.0; total_params], step: 0 }
    }
}

/// One AdamW update: bias-corrected moments, decoupled weight decay applied
/// to the pre-step value of decayed spans only (weights, not biases or
/// norm/affine scalars), then the nonnegativity projection `W <- max(W, 0)`
/// when enabled.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let layout = params.layout();
    let mut flat = params.to_flat();
    let g = grads.to_flat();
    if g.len() != flat.len() || state.m.len() != flat.len() {
        return Err(Error::Input(format!(
            "gradient/state size {} does not match parameter count {}",
            g.len(),
            flat.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for span in &layout.spans {
        for i in span.offset..span.offset + span.len {
            let m = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
            let v = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            state.m[i] = m;
            state.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let prev = flat[i];
            let mut next = prev - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if span.weight_decay {
                next -= lr * weight_decay * prev;
            }
            if span.nonneg && params.nonneg_w {
                next = next.max(0.0);
            }
            flat[i] = next;
        }
    }
    params.set_from_flat(&flat);
    Ok(())
}

/// Accuracy plus the `K x K` confusion matrix (rows = true class).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Array2<usize>,
    pub n: usize,
}

pub fn evaluate(samples: &[ConceptSequence], params: &ModelParams) -> Result<EvalReport> {
    use rayon::prelude::*;
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let k = params.classes();
    let preds: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|s| -> Result<(usize, usize)> {
            if s.label >= k {
                return Err(Error::Input(format!(
                    "label {} out of range [0, {k}) in sample `{}`",
                    s.label, s.id
                )));
            }
            let trace = forward(s, params, false, 0)?;
            Ok((s.label, trace.prediction))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = Array2::zeros((k, k));
    let mut correct = 0usize;
    for (truth, pred) in preds {
        confusion[[truth, pred]] += 1;
        if truth == pred {
            correct += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
        n: samples.len(),
    })
}

/// One epoch of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce: f64,
    pub l1: f64,
    pub sparse: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Wall time of the epoch. Reported in the JSON summary only; the CSV is
    /// kept timing-free so identical runs are byte-identical.
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub final_test_acc: f64,
    pub total_seconds: f64,
    /// Filled by the CLI once checkpoints are written.
    pub checkpoint_final: Option<String>,
    pub checkpoint_best: Option<String>,
}

impl TrainReport {
    /// Deterministic per-epoch CSV (`epoch,train_loss,ce,l1,sparse,train_acc,test_acc`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,ce,l1,sparse,train_acc,test_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.ce, r.l1, r.sparse, r.train_acc, r.test_acc
            ));
        }
        out
    }
}

pub struct FitResult {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub report: TrainReport,
}

fn shared_dims(train: &[ConceptSequence], test: &[ConceptSequence]) -> Result<(usize, usize)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("train and test sets must be non-empty".into()));
    }
    let c = train[0].concepts();
    let mut k = 0;
    for s in train.iter().chain(test.iter()) {
        if s.concepts() != c {
            return Err(Error::Input(format!(
                "sample `{}` has {} concepts, expected {c}",
                s.id,
                s.concepts()
            )));
        }
        k = k.max(s.label + 1);
    }
    Ok((c, k))
}

/// Shuffled minibatch training with per-epoch evaluation. Deterministic given
/// `config.seed`: init, shuffling, and dropout all derive from it. Emits both
/// the final-epoch parameters and the best-test-accuracy parameters (the
/// latter mirrors common reporting practice but is labeled as such).
pub fn fit(
    train: &[ConceptSequence],
    test: &[ConceptSequence],
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    let (c, k) = shared_dims(train, test)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let weights = class_weights(&labels, k)?;
    let model_cfg = config.model_config()?;
    let mut params = init_params(c, k, &model_cfg, sample_seed(config.seed, 0x1217))?;
    let mut adam = AdamState::new(params.layout().total);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, 0x5u64));
    let penalties = config.penalties();

    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_test_acc: f64::NEG_INFINITY,
        final_test_acc: 0.0,
        total_seconds: 0.0,
        checkpoint_final: None,
        checkpoint_best: None,
    };
    let mut best_params = params.clone();
    let start = Instant::now();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut l1_sum = 0.0;
        let mut sparse_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let members: Vec<ConceptSequence> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = pad_batch(&members)?;
            let dropout_seed =
                sample_seed(sample_seed(config.seed, epoch as u64), batch_idx as u64);
            let outcome = gradients(&batch, &params, &weights, penalties, dropout_seed);
            let (total, decomp, grads) = match outcome {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    report.total_seconds = start.elapsed().as_secs_f64();
                    return Err(Error::Diverged {
                        msg: format!("epoch {epoch}, batch {batch_idx}: {msg}"),
                        report: Box::new(report),
                    });
                }
                Err(e) => return Err(e),
            };
            let bs = chunk.len() as f64;
            loss_sum += total * bs;
            ce_sum += decomp.ce * bs;
            l1_sum += decomp.l1 * bs;
            sparse_sum += decomp.sparse * bs;
            seen += chunk.len();
            adamw_step(&mut params, &grads, &mut adam, config.learning_rate, config.weight_decay)?;
        }
        let train_acc = evaluate(train, &params)?.accuracy;
        let test_acc = evaluate(test, &params)?.accuracy;
        let n = seen as f64;
        report.epochs.push(EpochRow {
            epoch,
            train_loss: loss_sum / n,
            ce: ce_sum / n,
            l1: l1_sum / n,
            sparse: sparse_sum / n,
            train_acc,
            test_acc,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        if test_acc > report.best_test_acc {
            report.best_test_acc = test_acc;
            report.best_epoch = epoch;
            best_params = params.clone();
        }
    }
    report.final_test_acc = report.epochs.last().map(|r| r.test_acc).unwrap_or(0.0);
    report.total_seconds = start.elapsed().as_secs_f64();
    Ok(FitResult { final_params: params, best_params, report })
}

/// Mean-pooled linear probe: multinomial logistic regression on per-channel
/// temporal means, trained full-batch to convergence. Returns test accuracy.
///
/// This is the global-bottleneck baseline the temporal model is compared
/// against; it sees exactly the same activations but only through their
/// per-channel means.
pub fn linear_probe(train: &[ConceptSequence], test: &[ConceptSequence]) -> Result<f64> {
    let (c, k) = shared_dims(train, test)?;
    let mean_features = |s: &ConceptSequence| -> Array1<f64> {
        let t = s.len() as f64;
        (0..c).map(|j| s.activations.column(j).sum() / t).collect()
    };
    let feats: Vec<Array1<f64>> = train.iter().map(mean_features).collect();
    let n = train.len() as f64;

    let mut w = Array2::<f64>::zeros((k, c));
    let mut b = Array1::<f64>::zeros(k);
    let total = k * c + k;
    let mut adam = (vec![0.0; total], vec![0.0; total]);
    const ITERS: usize = 800;
    const LR: f64 = 0.05;
    const WD: f64 = 1e-4;
    for step in 1..=ITERS {
        let mut gw = Array2::<f64>::zeros((k, c));
        let mut gb = Array1::<f64>::zeros(k);
        for (f, s) in feats.iter().zip(train.iter()) {
            let logits = w.dot(f) + &b;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.mapv(|v| (v - max).exp()).sum().ln();
            for kk in 0..k {
                let p = (logits[kk] - lse).exp();
                let err = (p - if kk == s.label { 1.0 } else { 0.0 }) / n;
                gb[kk] += err;
                for j in 0..c {
                    gw[[kk, j]] += err * f[j];
                }
            }
        }
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let mut idx = 0;
        let mut update = |p: &mut f64, g: f64, decay: bool, adam: &mut (Vec<f64>, Vec<f64>)| {
            adam.0[idx] = ADAM_BETA1 * adam.0[idx] + (1.0 - ADAM_BETA1) * g;
            adam.1[idx] = ADAM_BETA2 * adam.1[idx] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = adam.0[idx] / bc1;
            let v_hat = adam.1[idx] / bc2;
            let prev = *p;
            *p -= LR * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decay {
                *p -= LR * WD * prev;
            }
            idx += 1;
        };
        for kk in 0..k {
            for j in 0..c {
                update(&mut w[[kk, j]], gw[[kk, j]], true, &mut adam);
            }
        }
        for kk in 0..k {
            update(&mut b[kk], gb[kk], false, &mut adam);
        }
    }

    let mut correct = 0usize;
    for s in test {
        let f = mean_features(s);
        let logits = w.dot(&f) + &b;
        if argmax(&logits) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn spec(samples_per_class: usize, sigma: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            concepts: 8,
            t_min: 6,
            t_max: 10,
            motif_len: 3,
            amplitude: 3.0,
            noise_sigma: sigma,
            samples_per_class,
            seed,
            distractors_per_sample: 0,
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn config_defaults_match_baseline() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.weight_decay, 1e-2);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.lambda_l1, 1e-3);
        assert_eq!(cfg.lambda_sparse, 1e-3);
        assert!(cfg.nonneg_w);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.variant, "diagonal");
        assert_eq!(cfg.depth, 1);
        assert_eq!(cfg.dropout_rate, 0.1);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(TrainConfig::from_json("{\"epochs\": 5, \"mystery\": 1}").is_err());
        assert!(TrainConfig::from_json("{\"learning_rate\": -1.0}").is_err());
        assert!(TrainConfig::from_json("{\"variant\": \"banana\"}").is_err());
    }

    #[test]
    fn adamw_zero_gradients_leave_params_unchanged() {
        let cfg = ModelConfig { dropout_rate: 0.0, ..Default::default() };
        let mut params = init_params(3, 2, &cfg, 1).unwrap();
        let before = params.to_flat();
        let grads = Gradients::zeros_like(&params);
        let mut adam = AdamState::new(before.len());
        adamw_step(&mut params, &grads, &mut adam, 1e-3, 0.0).unwrap();
        assert_eq!(params.to_flat(), before);
    }

    #[test]
    fn adamw_first_step_is_signed_unit_step() {
        let cfg = ModelConfig { dropout_rate: 0.0, nonneg_w: false, ..Default::default() };
        let mut params = init_params(2, 2, &cfg, 1).unwrap();
        let before = params.to_flat();
        let mut grads = Gradients::zeros_like(&params);
        grads.b = array![0.4, -0.7];
        let mut adam = AdamState::new(before.len());
        let lr = 1e-3;
        adamw_step(&mut params, &grads, &mut adam, lr, 0.0).unwrap();
        let after = params.to_flat();
        let layout = params.layout();
        let b_span = layout.spans.iter().find(|s| s.name == "b").unwrap();
        for (i, &g) in [0.4_f64, -0.7].iter().enumerate() {
            let idx = b_span.offset + i;
            let expect = before[idx] - lr * g / (g.abs() + ADAM_EPS);
            assert_relative_eq!(after[idx], expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn adamw_projects_negative_classifier_weights() {
        let cfg = ModelConfig { dropout_rate: 0.0, nonneg_w: true, ..Default::default() };
        let mut params = init_params(2, 2, &cfg, 1).unwrap();
        params.w.fill(0.0);
        let mut grads = Gradients::zeros_like(&params);
        grads.w.fill(5.0); // positive gradient pushes weights negative
        let mut adam = AdamState::new(params.layout().total);
        adamw_step(&mut params, &grads, &mut adam, 0.3, 0.0).unwrap();
        assert!(params.w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn initial_loss_is_near_ln_k_on_balanced_data() {
        let (train, _) = generate_synthetic(&spec(10, 0.5, 5)).unwrap();
        let cfg = TrainConfig::default();
        let model_cfg = cfg.model_config().unwrap();
        let params = init_params(8, 3, &model_cfg, sample_seed(cfg.seed, 0x1217)).unwrap();
        let batch = pad_batch(&train).unwrap();
        let (total, _) = loss(
            &batch,
            &params,
            &[1.0, 1.0, 1.0],
            Penalties { lambda_l1: 0.0, lambda_sparse: 0.0 },
            false,
            0,
        )
        .unwrap();
        let ln_k = 3.0_f64.ln();
        assert!(
            (total - ln_k).abs() <= 0.2 * ln_k,
            "initial loss {total} not within 20% of ln K = {ln_k}"
        );
    }

    #[test]
    fn dropping_padding_does_not_change_loss() {
        let (train, _) = generate_synthetic(&spec(4, 0.3, 7)).unwrap();
        let cfg = TrainConfig::default();
        let params =
            init_params(8, 3, &cfg.model_config().unwrap(), 3).unwrap();
        let pen = Penalties { lambda_l1: 1e-3, lambda_sparse: 1e-3 };
        let batch = pad_batch(&train).unwrap();
        // same samples, extra all-masked steps appended
        let mut padded = batch.clone();
        let (b, t, c) = padded.activations.dim();
        let mut bigger = ndarray::Array3::zeros((b, t + 3, c));
        bigger.slice_mut(ndarray::s![.., ..t, ..]).assign(&padded.activations);
        let mut mask = Array2::from_elem((b, t + 3), false);
        mask.slice_mut(ndarray::s![.., ..t]).assign(&padded.mask);
        padded.activations = bigger;
        padded.mask = mask;
        let w = [1.0, 1.0, 1.0];
        let (a, _) = loss(&batch, &params, &w, pen, false, 0).unwrap();
        let (btot, _) = loss(&padded, &params, &w, pen, false, 0).unwrap();
        assert!((a - btot).abs() <= 1e-9, "loss changed under padding: {a} vs {btot}");
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let (train, _) = generate_synthetic(&spec(8, 0.5, 9)).unwrap();
        let (test, _) = generate_synthetic(&spec(3, 0.5, 10)).unwrap();
        let mut cfg = quick_config();
        cfg.epochs = 5;
        let a = fit(&train, &test, &cfg).unwrap();
        let b = fit(&train, &test, &cfg).unwrap();
        assert_eq!(a.final_params, b.final_params);
        let rows_a: Vec<f64> = a.report.epochs.iter().map(|r| r.train_loss).collect();
        let rows_b: Vec<f64> = b.report.epochs.iter().map(|r| r.train_loss).collect();
        assert_eq!(rows_a, rows_b);
        assert_eq!(a.report.to_csv(), b.report.to_csv());
    }

    #[test]
    fn fit_learns_the_synthetic_task() {
        let (train, _) = generate_synthetic(&spec(20, 0.5, 11)).unwrap();
        let (test, _) = generate_synthetic(&spec(8, 0.5, 12)).unwrap();
        let cfg = TrainConfig { epochs: 90, batch_size: 8, ..Default::default() };
        let result = fit(&train, &test, &cfg).unwrap();
        assert!(
            result.report.best_test_acc >= 0.9,
            "best test accuracy {} too low",
            result.report.best_test_acc
        );
        // evaluate() agrees with the final-epoch log line
        let eval = evaluate(&test, &result.final_params).unwrap();
        assert_eq!(eval.accuracy, result.report.final_test_acc);
        // nonnegativity held throughout
        assert!(result.final_params.w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fit_aborts_on_divergence_with_partial_report() {
        let (train, _) = generate_synthetic(&spec(6, 0.5, 13)).unwrap();
        let (test, _) = generate_synthetic(&spec(2, 0.5, 14)).unwrap();
        let mut cfg = quick_config();
        // lr * weight_decay = 10 multiplies decayed weights by -9 each step,
        // so parameters overflow after a couple hundred updates
        cfg.learning_rate = 1e3;
        cfg.batch_size = 4;
        cfg.epochs = 200;
        match fit(&train, &test, &cfg) {
            Err(Error::Diverged { msg, .. }) => {
                assert!(msg.contains("epoch"), "{msg}");
            }
            Ok(r) => panic!(
                "expected divergence, finished with best acc {}",
                r.report.best_test_acc
            ),
            Err(e) => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn l1_sweep_thins_the_classifier() {
        let (train, _) = generate_synthetic(&spec(12, 0.5, 15)).unwrap();
        let (test, _) = generate_synthetic(&spec(4, 0.5, 16)).unwrap();
        let mut nnz_counts = Vec::new();
        for lambda in [1e-4, 1e-3, 1e-2, 1e-1] {
            let mut cfg = quick_config();
            cfg.epochs = 20;
            cfg.lambda_l1 = lambda;
            let result = fit(&train, &test, &cfg).unwrap();
            let nnz = result.final_params.w.iter().filter(|&&v| v != 0.0).count();
            nnz_counts.push(nnz);
        }
        for pair in nnz_counts.windows(2) {
            assert!(
                pair[1] <= pair[0],
                "nonzero count increased along the l1 sweep: {nnz_counts:?}"
            );
        }
    }

    #[test]
    fn evaluate_constant_predictor_hits_majority_frequency() {
        let (data, _) = generate_synthetic(&spec(5, 0.5, 17)).unwrap();
        let cfg = ModelConfig { dropout_rate: 0.0, ..Default::default() };
        let mut params = init_params(8, 3, &cfg, 1).unwrap();
        params.w.fill(0.0);
        params.b = array![0.0, 1.0, 0.0]; // always predicts class 1
        let eval = evaluate(&data, &params).unwrap();
        assert_relative_eq!(eval.accuracy, 1.0 / 3.0, max_relative = 1e-12);
        for truth in 0..3 {
            assert_eq!(eval.confusion[[truth, 1]], 5);
        }
    }

    #[test]
    fn evaluate_perfect_predictor_has_diagonal_confusion() {
        // noise-free data plus a hand-built classifier reading the planted
        // channels gives a provably perfect predictor
        let (test, table) = generate_synthetic(&spec(5, 0.0, 19)).unwrap();
        let cfg = ModelConfig { dropout_rate: 0.0, ..Default::default() };
        let mut params = init_params(8, 3, &cfg, 1).unwrap();
        if let crate::model::AttnParams::Diagonal { theta_v, .. } = &mut params.blocks[0].attn {
            theta_v.fill(0.0);
        }
        params.blocks[0].ffn_w2.fill(0.0);
        params.w.fill(0.0);
        for (k, &channel) in table.class_channels.iter().enumerate() {
            params.w[[k, channel]] = 1.0;
        }
        let eval = evaluate(&test, &params).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 5 } else { 0 };
                assert_eq!(eval.confusion[[i, j]], expect);
            }
        }
    }

    #[test]
    fn linear_probe_solves_the_noise_free_task() {
        let (train, _) = generate_synthetic(&spec(10, 0.0, 20)).unwrap();
        let (test, _) = generate_synthetic(&spec(5, 0.0, 21)).unwrap();
        let acc = linear_probe(&train, &test).unwrap();
        assert_eq!(acc, 1.0);
    }
}
