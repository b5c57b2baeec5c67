//! Diagnosis-by-reference pipeline: a frozen in-context tabular classifier,
//! masked multimodal pretraining for representation extraction, a learned
//! prompt-space adapter that maps representations into the classifier's
//! input distribution, synthetic data generators, and evaluation protocols.

pub mod adapter;
pub mod blocks;
pub mod data;
pub mod engine;
pub mod eval;
pub mod metrics;
pub mod mmtm;
pub mod oracle;
pub mod prior;
pub mod quantile;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("cannot fit a transform on zero rows")]
    EmptyFit,

    #[error("non-finite value in feature column {column}")]
    NonFiniteFeature { column: usize },

    #[error("feature count {got} outside supported range 1..={max}")]
    FeatureCount { got: usize, max: usize },

    #[error("class count {got} outside supported range 2..={max}")]
    ClassCount { got: usize, max: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class {class} has only {count} members; stratified splitting needs at least 3")]
    ClassTooSmall { class: usize, count: usize },

    #[error("training diverged at step {step}: loss {loss:.4} vs initial {initial:.4}")]
    TrainingDiverged { step: usize, loss: f64, initial: f64 },

    #[error(transparent)]
    Tensor(#[from] pdx_tensor::TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed data file: {0}")]
    Format(String),
}
