use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A computed value was NaN or infinite. `location` names the tape node,
    /// flow layer or integration step where it first appeared.
    #[error("non-finite value at {location}")]
    Numerical { location: String },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("reference moments unavailable for target `{0}`")]
    MomentsUnavailable(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("training diverged after {consecutive_skips} consecutive non-finite steps")]
    TrainingDiverged { consecutive_skips: usize },

    /// A leapfrog trajectory left the finite domain.
    #[error("divergent trajectory at leapfrog step {step}")]
    DivergentTrajectory { step: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("degenerate ranks: {0}")]
    DegenerateRanks(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numerical(location: impl Into<String>) -> Self {
        Error::Numerical {
            location: location.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
