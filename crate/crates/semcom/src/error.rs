//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, models, the channel, and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation produced a NaN or infinite value.
    #[error("numeric error: non-finite output in {op}")]
    NonFinite { op: &'static str },

    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration; lists every offending field.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// Channel coefficient has zero magnitude; the link is unusable.
    #[error("channel outage: |h| = 0")]
    ChannelOutage,

    /// A gradient check could not run because the function under test
    /// returned different values for identical inputs.
    #[error("gradient check aborted: {0}")]
    NonDeterministic(String),

    /// A numeric verification suite ran but exceeded its tolerance.
    #[error("numeric check failed in {check}: {detail}")]
    Numeric { check: &'static str, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    /// Malformed checkpoint or dataset file.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
