use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The operation is not valid for the current state of its inputs.
    #[error("invalid state: {0}")]
    State(String),

    #[error("shape mismatch: expected width {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("malformed file at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
