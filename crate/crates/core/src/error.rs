use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} id {id} out of vocabulary (size {size})")]
    OutOfVocab { what: String, id: usize, size: usize },

    #[error("sample has no candidates")]
    NoCandidates,

    #[error("mask row {row} has no visible key")]
    EmptyMaskRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("split boundary {boundary} outside data range [{min}, {max}]")]
    SplitBoundary { boundary: i64, min: i64, max: i64 },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
