use thiserror::Error;

/// Errors raised across the matching, transport and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("feature column {column} of the {side} set has zero norm")]
    ZeroNormColumn { side: &'static str, column: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid marginal weights: {0}")]
    InvalidWeights(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "kernel underflow at iteration {iteration}: a scaling denominator reached zero; \
         use a smaller eta (softer kernel) or rescale the costs"
    )]
    Underflow { iteration: usize },

    #[error("unbalanced marginals: row mass {row_mass} vs column mass {col_mass}")]
    Unbalanced { row_mass: f64, col_mass: f64 },

    #[error("problem too large for brute-force enumeration: {0}")]
    TooLarge(String),

    #[error("solver did not terminate: {0}")]
    NoConvergence(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("not enough groups: need at least {needed}, have {have}")]
    TooFewGroups { needed: usize, have: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("gradient is not finite for {0}")]
    NonFiniteGradient(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
