use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum PowdrError {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A binary file failed to parse; carries the byte offset of the defect.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A cross-module contract was violated (shape/schedule mismatch, stale cache).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numerical operation produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PowdrError>;

impl PowdrError {
    pub fn argument(msg: impl Into<String>) -> Self {
        PowdrError::Argument(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        PowdrError::Contract(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        PowdrError::Format {
            offset,
            message: msg.into(),
        }
    }
}
