use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the diffusion engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidInput { op: &'static str, reason: String },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),
    #[error("backward root must have exactly one element, found shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidInput {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
