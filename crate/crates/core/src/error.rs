//! Crate-wide error type.

use std::fmt;

/// Everything that can go wrong in kernels, the engine, or file handling.
#[derive(Debug)]
pub enum HanError {
    /// Operand shapes are incompatible with the requested operation.
    Shape(String),
    /// A configuration value violates a structural constraint.
    Config(String),
    /// A binary file does not follow its declared layout; `offset` is the
    /// byte position where parsing gave up.
    Format { offset: usize, message: String },
    /// A JSON document failed to parse or describes an invalid object.
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Training loss became non-finite at the given step.
    Diverged { step: usize },
}

pub type Result<T> = std::result::Result<T, HanError>;

impl fmt::Display for HanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HanError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            HanError::Config(msg) => write!(f, "invalid config: {msg}"),
            HanError::Format { offset, message } => {
                write!(f, "malformed file at byte {offset}: {message}")
            }
            HanError::Parse(msg) => write!(f, "parse error: {msg}"),
            HanError::Io(err) => write!(f, "io error: {err}"),
            HanError::Diverged { step } => {
                write!(f, "training diverged: loss became non-finite at step {step}")
            }
        }
    }
}

impl std::error::Error for HanError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            HanError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for HanError {
    fn from(err: std::io::Error) -> Self {
        HanError::Io(err)
    }
}

impl From<serde_json::Error> for HanError {
    fn from(err: serde_json::Error) -> Self {
        HanError::Parse(err.to_string())
    }
}
