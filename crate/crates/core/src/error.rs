use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate residual: target and drafter distributions coincide")]
    DegenerateResidual,

    #[error("unbounded divergence: q({token}) = 0 while p({token}) > 0")]
    UnboundedDivergence { token: usize },

    #[error("acceptance rate must lie in (0, 1], got {0}")]
    InvalidRate(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("off-policy update: sample from actor version {sample}, actor is at {actor}")]
    OffPolicy { sample: u64, actor: u64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("drafter assigns zero probability to token {token} with positive target mass")]
    ZeroDrafterMass { token: usize },

    #[error("learner channel closed")]
    LearnerGone,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
