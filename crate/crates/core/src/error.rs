use thiserror::Error;

/// Errors raised anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("variable {0} is not a leaf of this tape")]
    NotALeaf(usize),
    #[error("variable {0} does not belong to this tape")]
    UnknownVariable(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token {token} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("cache does not match model: {0}")]
    CacheMismatch(String),
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
