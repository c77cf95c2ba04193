use std::path::PathBuf;

use crate::subspace::BoundPoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("no stable subspace dimension satisfies the eigengap bound")]
    NoStableDimension { curve: Vec<BoundPoint> },

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("unsupported {format} version {found} (expected {expected})")]
    UnsupportedVersion {
        format: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("truncated {format} payload: expected {expected} bytes, found {found}")]
    Truncated {
        format: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value at byte offset {offset}")]
    NonFinite { offset: u64 },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by malformed or inconsistent data files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
                | Error::NonFinite { .. }
                | Error::Io { .. }
        )
    }

    /// True for failures of the numerical procedures themselves.
    pub fn is_numerical_error(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::NoStableDimension { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
