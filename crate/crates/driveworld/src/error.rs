//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid generator / model / training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape does not match what the operation expects.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input data violates a stated precondition (e.g. nonpositive depth).
    #[error("data error: {0}")]
    Data(String),

    /// On-disk artifact is malformed; names the offending field.
    #[error("format error in field `{field}`: {message}")]
    Format { field: String, message: String },

    /// A caller-side contract was violated (e.g. non-causal mask).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint version does not match the running binary.
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// Operation requires a nonempty input.
    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
