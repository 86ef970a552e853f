//! Crate error type with process exit codes for the CLI.

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum VgqcError {
    /// Bad configuration or input; exits 2.
    #[error("{0}")]
    Validation(String),
    /// Non-finite values during training or evaluation; exits 3.
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    /// Malformed or corrupt checkpoint file; exits 2.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl VgqcError {
    pub fn validation(msg: impl Into<String>) -> Self {
        VgqcError::Validation(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        VgqcError::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        VgqcError::Checkpoint(msg.into())
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            VgqcError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, VgqcError>;
