use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on entry names or shapes.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Caller supplied an invalid argument (out-of-range label, empty input, ...).
    #[error("input error: {0}")]
    Input(String),

    /// API used out of order (backward on an untaped value, empty head, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numerical routine could not proceed (e.g. a non-PSD covariance).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed text input; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint header is not one we understand.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint payload is inconsistent or truncated.
    #[error("corruption error at byte {offset}: {msg}")]
    Corruption { offset: u64, msg: String },

    /// Experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn alignment(msg: impl Into<String>) -> Error {
    Error::Alignment(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
