//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong in the pipeline, grouped so callers can map
/// errors onto coarse categories (validation, capability, numerical, I/O).
#[derive(Debug, Error)]
pub enum CoreError {
    /// Parameter or shape validation failed before any computation ran.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Grid shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The requested operation is not supported by this component
    /// (for example a score model without a usable VJP).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A computation produced non-finite values or hit a numerical guard.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training diverged or could not make progress.
    #[error("training failure: {0}")]
    Training(String),

    /// PSF calibration could not locate a usable peak.
    #[error("calibration failure: {0}")]
    Calibration(String),

    /// A file had the wrong magic, header, or payload size.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidParameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::ShapeMismatch(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
