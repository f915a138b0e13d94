use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} is outside the vocabulary of size {size}")]
    VocabMismatch { token: usize, size: usize },

    #[error("length ratio is undefined for an empty source")]
    EmptySource,

    #[error("non-finite logit in context {context}")]
    NonFiniteLogits { context: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("need at least {needed} candidates, got {got}")]
    TooFewCandidates { needed: usize, got: usize },

    #[error("empty micro-batch")]
    EmptyBatch,

    #[error("enumeration of {count} trajectories exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("zero behavior probability for token {token}")]
    ZeroProbability { token: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}
