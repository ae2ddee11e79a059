//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty tensor: {0}")]
    EmptyTensor(String),
    #[error("non-finite value at flat index {index}: {value}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bit-vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dataset format error at byte {offset}: {message}")]
    DatasetFormat { offset: u64, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown architecture {name:?}; known: {known:?}")]
    UnknownArch { name: String, known: Vec<&'static str> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
