use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (shape mismatch, bad extents, out-of-range parameter).
    #[error("contract violation in {op}: {reason}")]
    Contract { op: &'static str, reason: String },

    /// A NaN or infinity appeared in the output (or gradient) of an operation.
    #[error("non-finite value produced by {op}{}", .detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The file exists but its content cannot be decoded.
    #[error("{}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Error {
    Error::Contract {
        op,
        reason: reason.into(),
    }
}
