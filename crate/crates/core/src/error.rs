//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A line in a ratings or topics file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A value was syntactically fine but outside its allowed range.
    #[error("invalid value: {0}")]
    Value(String),

    /// An episode-protocol violation (repeat recommendation, unknown user, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Matrix/tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numerical failure (non-SPD matrix, non-finite loss, ...).
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Checkpoint file is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn value(msg: impl Into<String>) -> Self {
        Error::Value(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
