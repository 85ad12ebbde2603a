//! Multi-task time-series prediction for wireless networks.
//!
//! The crate implements the full pipeline around a shared causal-Transformer
//! forecaster that handles channel, angle, and traffic series through one set
//! of weights:
//!
//! - [`series`]: univariate decomposition, instance normalization, padding,
//!   patching, and patch masking of raw multivariate windows.
//! - [`model`]: the decoder-only Transformer (input embedding ResNet,
//!   positional and granularity encodings, causal attention, one-shot output
//!   head) plus a reverse-mode graph builder for training.
//! - [`tape`]: a small Wengert-list automatic-differentiation engine over
//!   dense matrices, used by training and gradient checks.
//! - [`training`]: MSE loss, batched reverse-mode gradients, Adam updates,
//!   batch construction over mixed task corpora, and resumable run state.
//! - [`gradcheck`]: central finite-difference verification of gradients.
//! - [`datagen`]: synthetic generators for channel, angle/delay, and traffic
//!   series, traffic CSV ingestion, and the dataset file format.
//! - [`eval`]: NMSE and downstream communication metrics, baselines, report
//!   serialization, and the experiment protocols (ablation, context sweep,
//!   zero-shot transfer, layer sweep).
//! - [`checkpoint`]: the versioned model checkpoint file format.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod series;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
