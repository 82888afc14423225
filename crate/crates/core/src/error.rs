//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or input value. The message carries the
    /// offending field path where one exists.
    #[error("config error: {0}")]
    Config(String),

    /// A simulation or optimization produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The ODE integrator left the finite domain.
    #[error("integration diverged: {0}")]
    IntegrationDiverged(String),

    /// A Kalman update could not be completed.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// An iterative solver failed to reach its termination criterion.
    #[error("solver error: {0}")]
    Solver(String),

    /// Vector/matrix dimensions do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 0 success, 2 config, 3 numerical, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_)
            | Error::IntegrationDiverged(_)
            | Error::Estimation(_)
            | Error::Solver(_)
            | Error::Dimension(_) => 3,
            Error::Io(_) => 4,
            Error::Json(_) => 2,
        }
    }
}
