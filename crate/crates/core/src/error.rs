use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chain: {0}")]
    InvalidChain(String),

    #[error("no unique stationary distribution: {0}")]
    NoUniqueStationary(String),

    #[error(
        "chain is not reversible (max detailed-balance violation {0:.3e}); spectrum may be complex"
    )]
    NotReversible(f64),

    #[error("window enumeration of {count} sequences exceeds cap {cap}")]
    EnumerationCap { count: u128, cap: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cannot parse probability {0:?}")]
    ParseProbability(String),

    #[error("expectation engine: {0}")]
    Engine(String),

    #[error("missing state-evolution trace: {0}")]
    MissingTrace(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
