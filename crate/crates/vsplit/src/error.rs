//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by the pipeline. `Config` maps to CLI exit code 2, every
/// other variant to exit code 3.
#[derive(Debug, Error)]
pub enum VsplitError {
    /// Invalid configuration (bad schema, out-of-range values, inconsistent
    /// flags). Messages include the offending field or file location.
    #[error("config error: {0}")]
    Config(String),

    /// An operation precondition was violated (shape mismatch, out-of-range
    /// argument, missing inputs).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Training aborted because the loss became non-finite.
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    /// Any other runtime failure.
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl VsplitError {
    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            VsplitError::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, VsplitError>;
