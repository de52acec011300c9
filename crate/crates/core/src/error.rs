use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to ingest {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lesion placement failed: {0}")]
    Placement(String),

    #[error("integrity check failed for {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("degenerate slice: {0}")]
    DegenerateSlice(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("training diverged for {kind} at step {step}; diagnostic checkpoint: {checkpoint:?}")]
    Divergence { kind: String, step: usize, checkpoint: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch { expected: expected.to_vec(), found: found.to_vec() }
    }
}
