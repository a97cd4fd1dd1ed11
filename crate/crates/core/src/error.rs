use thiserror::Error;

/// Errors raised across the coupling pipeline.
#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("config: {field} {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state is not frozen: {0}")]
    NotFrozen(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum { file: String, expected: String, actual: String },

    #[error("distribution: {0}")]
    Distribution(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CouplingError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CouplingError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = CouplingError> = std::result::Result<T, E>;
