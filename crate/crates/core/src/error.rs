use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments or configuration that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed or unusable data (NaN, constant columns, duplicate locations, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A factorization or numerical routine failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Corrupt, truncated, or unsupported container file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
