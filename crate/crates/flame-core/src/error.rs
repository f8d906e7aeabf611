//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for all fallible operations in this crate.
#[derive(Debug, Error)]
pub enum FlameError {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or matrix shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A scalar argument fell outside its documented range.
    #[error("out of range: {0}")]
    Range(String),

    /// The operation is not defined for the given variant.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A NaN or infinity was encountered where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A linear-algebra routine failed (singular matrix, ill conditioning).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Input text could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    /// A metric is undefined for the given inputs (e.g. all-zero truth).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FlameError>;

impl FlameError {
    /// Helper for shape errors that name both offending shapes.
    pub fn shapes(context: &str, a: &[usize], b: &[usize]) -> Self {
        FlameError::ShapeMismatch(format!("{context}: {a:?} vs {b:?}"))
    }
}
