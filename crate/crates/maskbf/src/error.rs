//! Crate-wide error type.
//!
//! Numerical routines distinguish between caller mistakes (shape or argument
//! validation) and runtime numerical failures (e.g. a covariance matrix that
//! is indefinite beyond tolerance). Callers that process many frequency bins
//! independently typically contain `NumericalError` per bin instead of
//! aborting the whole utterance.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller-supplied data has the wrong shape or inconsistent dimensions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or internally inconsistent
    /// (e.g. hop length exceeding the window, or a window/hop combination
    /// that does not cover every sample).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A value violates a documented domain constraint (e.g. negative mask).
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    /// A numerical routine failed (non-positive-definite pivot, eigensolver
    /// divergence, ...). Usually contained per frequency bin.
    #[error("numerical error: {0}")]
    NumericalError(String),

    /// A dataset file is missing or malformed; carries the offending path.
    #[error("dataset error: {message} ({path})")]
    Dataset { path: PathBuf, message: String },

    #[error("audio file error: {0}")]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn constraint(msg: impl Into<String>) -> Self {
        Error::ConstraintViolation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalError(msg.into())
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            message: msg.into(),
        }
    }
}
