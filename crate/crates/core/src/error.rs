//! Library error type.

use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("gamma^2 has not been estimated for this model")]
    GammaUnestimated,

    #[error("gamma^2 estimate is zero: every feature sits exactly on its centroid")]
    DegenerateGamma,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sampling chain diverged at step {step}")]
    ChainDiverged { step: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite parameters after update at epoch {epoch}, batch {batch}")]
    NonFiniteParams { epoch: usize, batch: usize },

    #[error("non-finite gradient during attack")]
    NonFiniteGradient,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Numerical blow-up during training or sampling.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::ChainDiverged { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteParams { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
