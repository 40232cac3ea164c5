//! Interventions: re-run inference after zeroing concept channels or
//! deleting windows, and the cumulative top-k channel-ablation curve
//! measured against the model's own predictions.

use ndarray::Array1;
use serde::Serialize;

use crate::data::ConceptSequence;
use crate::error::{Error, Result};
use crate::explain::{attribution_core, PiConvention};
use crate::model::{argmax, forward, lse_pool, ForwardTrace, ModelParams};

/// Where the zeroing happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RemovalMode {
    /// Zero the input columns `X[:, c]` before the temporal block (the input
    /// already is the concept-activation matrix).
    #[default]
    AtInput,
    /// Zero the bottleneck columns `Z[:, c]` instead, leaving the temporal
    /// block untouched.
    AtBottleneck,
}

impl std::fmt::Display for RemovalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RemovalMode::AtInput => write!(f, "input"),
            RemovalMode::AtBottleneck => write!(f, "bottleneck"),
        }
    }
}

/// How channels are ranked for the top-k curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankingMode {
    /// Rank by each sample's own predicted-class attribution.
    #[default]
    PerSample,
    /// One dataset-wide ranking by mean absolute attribution.
    Global,
}

impl std::fmt::Display for RankingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RankingMode::PerSample => write!(f, "per-sample"),
            RankingMode::Global => write!(f, "global"),
        }
    }
}

fn check_channels(channels: &[usize], c: usize) -> Result<()> {
    for &ch in channels {
        if ch >= c {
            return Err(Error::Input(format!("channel {ch} out of range [0, {c})")));
        }
    }
    Ok(())
}

/// Re-run the forward pass with the given concept channels removed.
pub fn remove_concepts(
    sample: &ConceptSequence,
    params: &ModelParams,
    channels: &[usize],
    mode: RemovalMode,
) -> Result<ForwardTrace> {
    check_channels(channels, params.concepts())?;
    match mode {
        RemovalMode::AtInput => {
            let mut x = sample.activations.clone();
            for &c in channels {
                x.column_mut(c).fill(0.0);
            }
            let modified = ConceptSequence { id: sample.id.clone(), label: sample.label, activations: x };
            forward(&modified, params, false, 0)
        }
        RemovalMode::AtBottleneck => {
            let mut trace = forward(sample, params, false, 0)?;
            for &c in channels {
                trace.z.column_mut(c).fill(0.0);
            }
            let t_len = trace.z.nrows();
            for t in 0..t_len {
                let row = params.w.dot(&trace.z.row(t)) + &params.b;
                trace.logits_t.row_mut(t).assign(&row);
            }
            let mask = trace.mask.clone();
            trace.pooled_logits =
                lse_pool(trace.logits_t.view(), &mask, params.tau, params.lse_normalized)?;
            trace.pooled_concepts =
                lse_pool(trace.z.view(), &mask, params.tau, params.lse_normalized)?;
            trace.prediction = argmax(&trace.pooled_logits);
            Ok(trace)
        }
    }
}

/// Delete the given windows (0-based) and re-run the forward pass on the
/// shortened sequence. At least one window must survive.
pub fn remove_windows(
    sample: &ConceptSequence,
    params: &ModelParams,
    windows: &[usize],
) -> Result<ForwardTrace> {
    let t = sample.len();
    for &w in windows {
        if w >= t {
            return Err(Error::Input(format!("window {w} out of range [0, {t})")));
        }
    }
    let keep: Vec<usize> = (0..t).filter(|i| !windows.contains(i)).collect();
    if keep.is_empty() {
        return Err(Error::Input("cannot remove every window".into()));
    }
    let c = sample.concepts();
    let mut x = ndarray::Array2::zeros((keep.len(), c));
    for (row, &src) in keep.iter().enumerate() {
        x.row_mut(row).assign(&sample.activations.row(src));
    }
    let shortened = ConceptSequence { id: sample.id.clone(), label: sample.label, activations: x };
    forward(&shortened, params, false, 0)
}

/// One (sample, k) outcome of the ablation curve.
#[derive(Debug, Clone, Serialize)]
pub struct InterventionRecord {
    pub id: String,
    pub k: usize,
    pub removed_channels: Vec<usize>,
    pub original_prediction: usize,
    pub original_logit: f64,
    pub prediction: usize,
    pub logit: f64,
    pub retained: bool,
}

/// Retained-prediction curve plus per-sample records.
#[derive(Debug, Clone)]
pub struct InterventionReport {
    /// `curve[k]` = fraction of samples whose prediction survives removing
    /// the top-k channels; `curve[0]` is exactly 1.
    pub curve: Vec<f64>,
    pub records: Vec<InterventionRecord>,
    pub mode: RemovalMode,
    pub ranking: RankingMode,
}

impl InterventionReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("k,retained_fraction\n");
        for (k, v) in self.curve.iter().enumerate() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// Cumulative top-k channel ablation, scored against the model's own
/// predictions (`k = 0` is exact agreement by construction).
///
/// Channels are ranked by `|global attribution|` for the predicted class,
/// per sample or dataset-wide depending on `ranking`.
pub fn topk_curve(
    samples: &[ConceptSequence],
    params: &ModelParams,
    k_max: usize,
    mode: RemovalMode,
    ranking: RankingMode,
) -> Result<InterventionReport> {
    if samples.is_empty() {
        return Err(Error::Input("intervention needs a non-empty dataset".into()));
    }
    let c = params.concepts();
    if k_max >= c {
        return Err(Error::Input(format!(
            "k_max = {k_max} must be smaller than C = {c}"
        )));
    }
    let traces: Vec<ForwardTrace> = samples
        .iter()
        .map(|s| forward(s, params, false, 0))
        .collect::<Result<Vec<_>>>()?;
    let attributions: Vec<Array1<f64>> = traces
        .iter()
        .map(|trace| {
            attribution_core(trace, params, trace.prediction, PiConvention::default()).global_attr
        })
        .collect();
    let rank_channels = |attr: &Array1<f64>| -> Vec<usize> {
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            attr[b].abs().partial_cmp(&attr[a].abs()).unwrap().then(a.cmp(&b))
        });
        order
    };
    let global_order: Option<Vec<usize>> = match ranking {
        RankingMode::PerSample => None,
        RankingMode::Global => {
            let mut mean = Array1::<f64>::zeros(c);
            for attr in &attributions {
                mean += &attr.mapv(f64::abs);
            }
            mean /= samples.len() as f64;
            Some(rank_channels(&mean))
        }
    };

    let mut curve = vec![0.0; k_max + 1];
    let mut records = Vec::with_capacity(samples.len() * (k_max + 1));
    for ((sample, trace), attr) in samples.iter().zip(&traces).zip(&attributions) {
        let order = match &global_order {
            Some(o) => o.clone(),
            None => rank_channels(attr),
        };
        let original_prediction = trace.prediction;
        let original_logit = trace.pooled_logits[original_prediction];
        for k in 0..=k_max {
            let removed: Vec<usize> = order[..k].to_vec();
            let intervened = if k == 0 {
                // removing nothing is the identity on the trace
                trace.clone()
            } else {
                remove_concepts(sample, params, &removed, mode)?
            };
            let retained = intervened.prediction == original_prediction;
            if retained {
                curve[k] += 1.0;
            }
            records.push(InterventionRecord {
                id: sample.id.clone(),
                k,
                removed_channels: removed,
                original_prediction,
                original_logit,
                prediction: intervened.prediction,
                logit: intervened.pooled_logits[intervened.prediction],
                retained,
            });
        }
    }
    for v in curve.iter_mut() {
        *v /= samples.len() as f64;
    }
    Ok(InterventionReport { curve, records, mode, ranking })
}
