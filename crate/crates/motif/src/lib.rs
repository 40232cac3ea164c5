//! Concept-bottleneck sequence classification with per-channel temporal
//! self-attention.
//!
//! The model consumes variable-length sequences of concept activations
//! (one `T x C` matrix per sample), processes each concept channel with its
//! own temporal attention map so that no evidence leaks between concepts,
//! and pools per-time-step logits over time with a temperature-controlled
//! log-sum-exp. Because the classifier head is linear in the (nonnegative)
//! concept activations, every prediction decomposes exactly into per-time,
//! per-concept contributions.
//!
//! Modules:
//! - [`data`]: dataset types, synthetic motif generator, batching, projection
//!   of precomputed embeddings onto a concept bank.
//! - [`model`]: forward pass (diagonal / full attention, bottleneck, masked
//!   LSE pooling).
//! - [`grad`]: hand-derived reverse-mode gradients for every parameter.
//! - [`gradcheck`]: central finite-difference harness used to verify them.
//! - [`train`]: loss, AdamW, the epoch loop, evaluation, a mean-pooled
//!   linear-probe baseline.
//! - [`explain`]: temporal importance weights, global/local attributions,
//!   attention maps, temperature sweeps.
//! - [`intervene`]: concept / window removal and top-k ablation curves.

pub mod data;
pub mod error;
pub mod explain;
pub mod grad;
pub mod gradcheck;
pub mod intervene;
pub mod model;
pub mod train;

pub use error::{Error, Result};
