//! MCNet: multi-view imputation and cross-attention network for incomplete
//! longitudinal, multimodal feature sequences.
//!
//! The crate provides the full pipeline at desk scale: a reverse-mode
//! autodiff core, the MinimalRNN backbone, multi-view imputation with
//! adversarial refinement, cross-attention fusion with longitudinal and
//! conversion heads, staged training, metrics and baselines, a synthetic
//! cohort generator, and the `mcnet` CLI that wires them together.

pub mod error;
pub mod graph;
pub mod opt;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
