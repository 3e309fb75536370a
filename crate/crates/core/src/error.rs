use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("dense covariance input is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("invalid initialization: {0}")]
    InvalidInit(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("regime is singular: {0}")]
    SingularRegime(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("step size {eta} too large: trial step raised the loss from {before} to {after}")]
    StepSizeTooLarge { eta: f64, before: f64, after: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
