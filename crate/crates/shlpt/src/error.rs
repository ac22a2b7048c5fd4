//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("duplicate task id: {0}")]
    DuplicateTask(String),

    #[error("prompt for task {0} is not frozen")]
    UnfrozenPrompt(String),

    #[error("weight hash mismatch: expected {expected}, got {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("degenerate cosine input: {0}")]
    DegenerateCosine(String),

    #[error("nothing to resume in {0}")]
    NothingToResume(String),

    #[error("run directory is locked: {0}")]
    Locked(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
