use thiserror::Error;

/// Errors raised by backends (model servers or the tabular simulator).
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("backend produced an empty generation")]
    EmptyGeneration,
    #[error("reward {value} outside the declared scale {scale}")]
    RewardOutOfScale { value: f64, scale: &'static str },
    #[error("{0}")]
    Unsupported(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum RsdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("weighting `{0}` needs a likelihood ratio")]
    MissingLikelihoodRatio(&'static str),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("search space too large: {0}")]
    SearchSpace(String),
}
