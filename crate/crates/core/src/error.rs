use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised when an operation's preconditions do not hold.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("network spec mismatch: {0}")]
    SpecMismatch(String),
}

impl Error {
    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
