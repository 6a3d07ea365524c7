use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Caller violated an API precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Argument outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Configuration the implementation deliberately does not support.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Malformed input data (bad manifest line, inconsistent dataset).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, message: msg.into() }
    }

    /// True for errors caused by the caller (as opposed to bad data on disk).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Unsupported(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
