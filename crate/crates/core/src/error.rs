use thiserror::Error;

/// Errors raised by the simulator and the bound evaluators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty mini-batch")]
    EmptyBatch,

    #[error("dataset too small: need {needed} points in {pool}, have {available}")]
    DatasetTooSmall {
        pool: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("no closed form for {0}; use the sampled oracle instead")]
    NoClosedForm(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing measured input: {0}")]
    MissingInput(&'static str),

    #[error("trial aborted at round {round}: {reason}")]
    Aborted { round: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
