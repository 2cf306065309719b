//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the unmixing library.
#[derive(Debug, Error)]
pub enum UnmixError {
    /// Tensor/matrix extents do not line up for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is outside its admissible range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input violates a mathematical precondition (negative threshold,
    /// zero-norm spectrum, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Endmember extraction could not complete.
    #[error("endmember extraction failed: {0}")]
    Extraction(String),

    /// The forward fixed-point solve produced a non-finite iterate.
    #[error("fixed-point solve failed: {message}; residual history {residuals:?}")]
    Solver {
        message: String,
        residuals: Vec<f64>,
    },

    /// The adjoint (Neumann) iteration diverged.
    #[error("backward pass failed: {0}")]
    Backward(String),

    /// On-disk container or checkpoint is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl UnmixError {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        UnmixError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, UnmixError>;
