use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("step {step} outside schedule 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("product density has zero mass (disjoint supports)")]
    ZeroMass,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampling failed at step {step}: {source}")]
    Sampling {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Config(#[from] crate::kvtext::KvError),

    #[error("format error: {0}")]
    Format(String),

    #[error("remote score source: {0}")]
    Remote(#[from] crate::scorewire::WireError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
