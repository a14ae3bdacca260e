use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid probability table: {0}")]
    InvalidProbability(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} did not converge within {iters} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("policy has zero probability at (s={state}, a={action}) where the occupancy has mass")]
    UndefinedPenalty { state: usize, action: usize },

    #[error("zero probability at (s={state}, a={action}) in {what}")]
    ZeroProbability {
        what: &'static str,
        state: usize,
        action: usize,
    },

    #[error("saddle optimization diverged at round {round}")]
    Divergence { round: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular linear system")]
    Singular,

    #[error("environment generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
