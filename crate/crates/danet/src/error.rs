//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument is outside the operation's domain (bad axis, empty
    /// input, zero bandwidth, unsupported reduction ratio, ...).
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A forward pass produced a NaN or infinity.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// Malformed text input (point files, manifests, config files).
    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },

    /// Malformed or truncated checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A network layer received fewer points than it can operate on.
    #[error("layer {layer}: needs at least {needed} points, got {got}")]
    TooFewPoints {
        layer: String,
        needed: usize,
        got: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn parse(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
