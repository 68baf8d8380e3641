use thiserror::Error;

use crate::tensor_store::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("row {row} is not a probability vector")]
    NotStochastic { row: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("sample sets disagree: {0}")]
    SampleMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
