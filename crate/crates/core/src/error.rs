//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A matrix that had to be positive definite was not. `min_eigenvalue`
    /// is the smallest eigenvalue of the (symmetrized) offending matrix.
    #[error("numerical failure: {context} (smallest eigenvalue {min_eigenvalue:e})")]
    NumericalFailure {
        context: String,
        min_eigenvalue: f64,
    },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("unsupported in plugin mode: {0}")]
    UnsupportedInPluginMode(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::InvalidDimension(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::PreconditionViolation(_) => 2,
            Error::Format { .. } | Error::Io(_) | Error::EmptyInput(_) => 3,
            Error::InvalidDimension(_) | Error::UnsupportedInPluginMode(_) => 2,
            Error::NumericalFailure { .. }
            | Error::NonConvergence { .. }
            | Error::InsufficientSamples { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
