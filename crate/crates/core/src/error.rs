use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("objective evaluation failed: {0}")]
    EvaluationFailed(String),

    /// The homotopy path needed more breakpoints than allowed.
    #[error("homotopy exceeded {max_steps} breakpoints (residual {residual:.3e}, target {target:.3e})")]
    MaxStepsExceeded {
        max_steps: usize,
        residual: f64,
        target: f64,
    },

    /// The active-set Gram matrix could not be factorized.
    #[error("degenerate homotopy step: active set of size {active} is numerically singular")]
    DegenerateStep { active: usize },

    #[error("gradient recovery failed: {0}")]
    RecoveryFailed(Box<Error>),

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("requested {requested} directions but numerical rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("unknown function family `{0}`")]
    UnknownFunction(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
