use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bytes that do not follow the declared file layout.
    #[error("format error: {0}")]
    Format(String),

    /// A single event record failed validation.
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient events: stream has {available}, need at least {required}")]
    InsufficientEvents { available: usize, required: usize },

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    /// Operation invoked in the wrong lifecycle state (e.g. reading gradients before backward).
    #[error("state error: {0}")]
    State(String),

    /// Checkpoint, architecture or data that do not belong together.
    #[error("incompatible: {0}")]
    Compat(String),

    #[error("non-finite activation after layer {layer}")]
    Numeric { layer: usize },

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
