use std::io;

use thiserror::Error;

/// Errors raised across the library. Variants map onto process exit codes in the CLI.
#[derive(Debug, Error)]
pub enum HtclError {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint corrupted: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("incompatible tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    Incompatible {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl HtclError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        HtclError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = HtclError> = std::result::Result<T, E>;
