//! Prediction decomposition: per-time per-concept contributions, temporal
//! importance weights, global attributions, local top-window views, and
//! per-concept attention maps, plus the temperature sweep machinery.
//!
//! Because the head is linear in the nonnegative bottleneck activations, the
//! algebra is exact: `s_t = sum_c contributions[t, c] + b_k` and the pooled
//! score satisfies `sum_c global[c] + b_k = sum_t pi_t s_t`.

use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use crate::data::ConceptSequence;
use crate::error::{Error, Result};
use crate::model::{argmax, forward, lse_pool, ForwardTrace, ModelParams, Variant};

/// How the temporal importance weights respond to the temperature.
///
/// The default makes larger `tau` produce sharper (lower-entropy) weights,
/// consistent with the pooling convention `exp(tau v)`. `PaperEq7` keeps the
/// literal `exp(s / tau)` reading for auditability, under which larger `tau`
/// flattens the weights instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PiConvention {
    #[default]
    SharpensWithTau,
    PaperEq7,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConceptContribution {
    pub name: String,
    pub value: f64,
}

/// One decisive window with its strongest concept contributions.
#[derive(Debug, Clone, Serialize)]
pub struct LocalWindowView {
    pub t: usize,
    pub pi: f64,
    pub concepts: Vec<ConceptContribution>,
}

/// Time- and concept-resolved decomposition of one prediction.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub target_class: usize,
    /// `contributions[t, c] = Z[t, c] * W[k, c]`, exact for every row.
    pub contributions: Array2<f64>,
    /// `scores[t] = sum_c contributions[t, c] + b_k`.
    pub scores: Array1<f64>,
    /// Temporal importance; sums to 1 over valid steps, 0 at masked steps.
    pub pi: Array1<f64>,
    /// `global[c] = sum_t pi_t * contributions[t, c]`.
    pub global_attr: Array1<f64>,
    /// First-block attention maps (`C x T x T` diagonal, `H x T x T` full).
    pub attn_maps: Array3<f64>,
    pub concept_names: Vec<String>,
    /// Top windows by `pi`, each with its largest-magnitude contributions.
    pub local: Vec<LocalWindowView>,
    /// Largest-magnitude global attributions, signed.
    pub global_top: Vec<ConceptContribution>,
    pub convention: PiConvention,
}

pub(crate) struct AttributionCore {
    pub contributions: Array2<f64>,
    pub scores: Array1<f64>,
    pub pi: Array1<f64>,
    pub global_attr: Array1<f64>,
}

/// Shared algebra of every explanation: contributions, scores, softmax
/// weights over valid steps, and the pi-weighted global attribution.
pub(crate) fn attribution_core(
    trace: &ForwardTrace,
    params: &ModelParams,
    k: usize,
    convention: PiConvention,
) -> AttributionCore {
    let (t_len, c_len) = trace.z.dim();
    let n = trace.valid_len();
    let mut contributions = Array2::zeros((t_len, c_len));
    let mut scores = Array1::zeros(t_len);
    for t in 0..t_len {
        let mut s = params.b[k];
        for c in 0..c_len {
            let v = trace.z[[t, c]] * params.w[[k, c]];
            contributions[[t, c]] = v;
            s += v;
        }
        scores[t] = s;
    }
    let sharpness = match convention {
        PiConvention::SharpensWithTau => params.tau,
        PiConvention::PaperEq7 => 1.0 / params.tau,
    };
    let mut pi = Array1::zeros(t_len);
    let mut max = f64::NEG_INFINITY;
    for t in 0..n {
        if sharpness * scores[t] > max {
            max = sharpness * scores[t];
        }
    }
    let mut denom = 0.0;
    for t in 0..n {
        let e = (sharpness * scores[t] - max).exp();
        pi[t] = e;
        denom += e;
    }
    for t in 0..n {
        pi[t] /= denom;
    }
    let mut global_attr = Array1::zeros(c_len);
    for t in 0..n {
        for c in 0..c_len {
            global_attr[c] += pi[t] * contributions[[t, c]];
        }
    }
    AttributionCore { contributions, scores, pi, global_attr }
}

#[derive(Debug, Clone, Copy)]
pub struct ExplainOptions {
    /// Windows listed in the local view.
    pub top_windows: usize,
    /// Concepts listed per window and in the global view.
    pub top_concepts: usize,
    pub convention: PiConvention,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self { top_windows: 3, top_concepts: 5, convention: PiConvention::default() }
    }
}

fn top_by_magnitude(values: &[(usize, f64)], m: usize) -> Vec<(usize, f64)> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap().then(a.0.cmp(&b.0)));
    v.truncate(m);
    v
}

/// Decompose `trace`'s score for class `k` into temporal and concept parts.
pub fn explain(
    trace: &ForwardTrace,
    params: &ModelParams,
    k: usize,
    concept_names: &[String],
    opts: &ExplainOptions,
) -> Result<Explanation> {
    if k >= params.classes() {
        return Err(Error::Input(format!(
            "class {k} out of range [0, {})",
            params.classes()
        )));
    }
    if concept_names.len() != params.concepts() {
        return Err(Error::Input(format!(
            "{} concept names for C = {}",
            concept_names.len(),
            params.concepts()
        )));
    }
    if trace.z.ncols() != params.concepts() {
        return Err(Error::Input("trace does not match model width".into()));
    }
    let core = attribution_core(trace, params, k, opts.convention);
    let n = trace.valid_len();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| core.pi[b].partial_cmp(&core.pi[a]).unwrap().then(a.cmp(&b)));
    let local = order
        .into_iter()
        .take(opts.top_windows)
        .map(|t| {
            let row: Vec<(usize, f64)> = (0..params.concepts())
                .map(|c| (c, core.contributions[[t, c]]))
                .collect();
            LocalWindowView {
                t,
                pi: core.pi[t],
                concepts: top_by_magnitude(&row, opts.top_concepts)
                    .into_iter()
                    .map(|(c, v)| ConceptContribution { name: concept_names[c].clone(), value: v })
                    .collect(),
            }
        })
        .collect();
    let global: Vec<(usize, f64)> = (0..params.concepts())
        .map(|c| (c, core.global_attr[c]))
        .collect();
    let global_top = top_by_magnitude(&global, opts.top_concepts)
        .into_iter()
        .map(|(c, v)| ConceptContribution { name: concept_names[c].clone(), value: v })
        .collect();

    Ok(Explanation {
        target_class: k,
        contributions: core.contributions,
        scores: core.scores,
        pi: core.pi,
        global_attr: core.global_attr,
        attn_maps: trace.attn().clone(),
        concept_names: concept_names.to_vec(),
        local,
        global_top,
        convention: opts.convention,
    })
}

/// Shannon entropy in nats of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
        return Err(Error::Input(format!(
            "not a probability vector (sum = {sum})"
        )));
    }
    Ok(p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum())
}

/// Temporal attention maps for one concept.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    /// One `T x T` map for the diagonal variant; all `H` head maps for the
    /// full variant (which cannot attribute maps to single concepts).
    pub maps: Vec<Array2<f64>>,
    pub concept_attribution_lost: bool,
}

/// Per-concept attention map: rows are query steps, columns key steps, the
/// masked region is zero and valid rows are row-stochastic.
pub fn attention_map(trace: &ForwardTrace, concept: usize) -> Result<AttentionMaps> {
    match trace.variant {
        Variant::Diagonal => {
            if concept >= trace.attn().shape()[0] {
                return Err(Error::Input(format!(
                    "concept {concept} out of range [0, {})",
                    trace.attn().shape()[0]
                )));
            }
            Ok(AttentionMaps {
                maps: vec![trace.attn().index_axis(ndarray::Axis(0), concept).to_owned()],
                concept_attribution_lost: false,
            })
        }
        Variant::Full => {
            let heads = trace.attn().shape()[0];
            Ok(AttentionMaps {
                maps: (0..heads)
                    .map(|h| trace.attn().index_axis(ndarray::Axis(0), h).to_owned())
                    .collect(),
                concept_attribution_lost: true,
            })
        }
    }
}

/// Render a map as CSV rows (query step per line).
pub fn map_to_csv(map: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in map.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Rescale a map to the unit interval for renderer-agnostic heatmaps.
pub fn normalized_heatmap(map: &Array2<f64>) -> Array2<f64> {
    let max = map.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        map.mapv(|v| v / max)
    } else {
        map.clone()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TauSweepRow {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_concept_entropy: f64,
    pub mean_logit_entropy: f64,
}

/// Per-sample entropies across the grid (rows = grid points) plus the
/// aggregated table.
#[derive(Debug, Clone)]
pub struct TauSweepResult {
    pub rows: Vec<TauSweepRow>,
    pub logit_entropy: Array2<f64>,
    pub concept_entropy: Array2<f64>,
    pub predictions: Vec<Vec<usize>>,
}

/// Re-pool and re-explain a trained model under each temperature in `grid`
/// without retraining.
///
/// For each sample the per-time logits and bottleneck activations are
/// computed once; each grid point then re-pools them for accuracy, computes
/// the logit-level entropy from the temporal weights of the class the
/// checkpoint predicts, and the concept-level entropy as the mean over
/// concepts of the temporal softmax of `tau * Z[:, c]`.
pub fn tau_sweep(
    samples: &[ConceptSequence],
    params: &ModelParams,
    grid: &[f64],
) -> Result<TauSweepResult> {
    if samples.is_empty() {
        return Err(Error::Input("tau sweep needs a non-empty dataset".into()));
    }
    if grid.is_empty() || grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Input("tau grid must be non-empty and positive".into()));
    }
    let n_samples = samples.len();
    let mut logit_entropy = Array2::zeros((grid.len(), n_samples));
    let mut concept_entropy = Array2::zeros((grid.len(), n_samples));
    let mut correct = vec![0usize; grid.len()];
    let mut predictions = vec![Vec::with_capacity(n_samples); grid.len()];
    for (si, sample) in samples.iter().enumerate() {
        let trace = forward(sample, params, false, 0)?;
        let mask = vec![true; sample.len()];
        let n = sample.len();
        // scores of the checkpoint's own prediction, fixed across the grid
        let base = attribution_core(&trace, params, trace.prediction, PiConvention::SharpensWithTau);
        for (gi, &tau) in grid.iter().enumerate() {
            let pooled = lse_pool(trace.logits_t.view(), &mask, tau, params.lse_normalized)?;
            let pred = argmax(&pooled);
            predictions[gi].push(pred);
            if pred == sample.label {
                correct[gi] += 1;
            }
            logit_entropy[[gi, si]] = entropy(&softmax_scaled(&base.scores, n, tau))?;
            let mut h_sum = 0.0;
            for c in 0..params.concepts() {
                let col: Vec<f64> = (0..n).map(|t| trace.z[[t, c]]).collect();
                h_sum += entropy(&softmax_scaled_vec(&col, tau))?;
            }
            concept_entropy[[gi, si]] = h_sum / params.concepts() as f64;
        }
    }
    let rows = grid
        .iter()
        .enumerate()
        .map(|(gi, &tau)| TauSweepRow {
            tau,
            accuracy: correct[gi] as f64 / n_samples as f64,
            mean_concept_entropy: concept_entropy.row(gi).mean().unwrap(),
            mean_logit_entropy: logit_entropy.row(gi).mean().unwrap(),
        })
        .collect();
    Ok(TauSweepResult { rows, logit_entropy, concept_entropy, predictions })
}

fn softmax_scaled(scores: &Array1<f64>, n: usize, tau: f64) -> Vec<f64> {
    softmax_scaled_vec(&scores.iter().take(n).cloned().collect::<Vec<_>>(), tau)
}

fn softmax_scaled_vec(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|&v| (tau * (v - max)).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}
