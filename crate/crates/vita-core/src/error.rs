//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VitaError {
    /// Shape or rank disagreement between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or schema violation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unreadable input data (datasets, checkpoints, tables).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or failed numerical preconditions.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl VitaError {
    /// Stable process exit code contract: 0 success, 1 config, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            VitaError::Config(_) => 1,
            VitaError::Shape(_) | VitaError::Data(_) | VitaError::Io(_) => 2,
            VitaError::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, VitaError>;
