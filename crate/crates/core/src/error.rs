use thiserror::Error;

use crate::data::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed graph file: {0}")]
    GraphFormat(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
