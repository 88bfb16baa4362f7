//! Cross-modal audio/text fusion network for utterance-level emotion
//! classification in dialogues.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `f64` tensors and a reverse-mode
//!   differentiation graph rebuilt per forward pass.
//! - [`gradcheck`]: central finite-difference verification.
//! - [`layers`]: affine maps, layer norm, feed-forward, LSTM/BiLSTM.
//! - [`attention`] and [`model`]: parallel self-/cross-attention, mid-level
//!   fusion, residual branches and the classification head.
//! - [`train`]: cross-entropy, Adam with L2 decay, early-stopped fitting.
//! - [`data`], [`synth`], [`metrics`]: dataset files, synthetic dialogues,
//!   batching and weighted F1.
//! - [`checkpoint`]: versioned binary checkpoints.
//!
//! Batch-level work (per-dialogue gradients, evaluation, finite differences)
//! runs through [`exec`], which uses rayon when the `parallel` feature is on.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use exec::ExecMode;
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
