use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DoraError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DoraError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite values in layer {layer}: {detail}")]
    NumericOverflow { layer: usize, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("no valid clip: {0}")]
    Exhausted(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DoraError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DoraError::Io { path: path.into(), source }
    }
}
