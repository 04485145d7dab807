//! Multi-exit classifiers trained with a per-exit fairness-regularized
//! loss, confidence-based early-exit inference, and group-fairness metrics.
//!
//! The pipeline at a glance:
//!
//! 1. [`data`] builds or loads a [`Dataset`] with a binary sensitive attribute.
//! 2. [`model::train`] fits a [`MultiExitModel`] on the weighted joint loss.
//! 3. [`inference`] picks, per sample, the earliest exit that is confident enough.
//! 4. [`metrics`] reports Eopp0, Eopp1, Eodd and per-group accuracy scores.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fairness;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod report;
pub mod tensor;

pub use data::{Dataset, SynthSpec};
pub use error::{Error, Result};
pub use fairness::{KernelSpec, Regularizer};
pub use inference::{Exit, ExitMode, InferenceConfig, InferenceTrace};
pub use metrics::{Aggregation, FairnessReport};
pub use model::{LossBreakdown, ModelConfig, MultiExitModel, TrainConfig};
pub use tensor::{Matrix, ParamStore};
