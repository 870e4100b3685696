use thiserror::Error;

/// Errors produced by the counting toolkit.
///
/// Variants are grouped by failure family so front-ends can map them to
/// distinct exit codes (see [`Error::family`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("record `{id}` has a zero ground-truth count; NAE and SRE are undefined")]
    ZeroGroundTruth { id: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("instance too large for the brute-force oracle: n*m = {size} > {limit}")]
    OracleTooLarge { size: usize, limit: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification of an [`Error`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Validation,
    ZeroCount,
    Numerical,
    Io,
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::ZeroGroundTruth { .. } => ErrorFamily::ZeroCount,
            Error::Numerical(_) => ErrorFamily::Numerical,
            Error::Io(_) => ErrorFamily::Io,
            _ => ErrorFamily::Validation,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
