//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by schedules, oracles, samplers, trainers and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad parameter ranges, incompatible strategy/model pairs,
    /// malformed config files). Maps to CLI exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical degeneracy (NaN gradients, vanishing alpha-bar, singular matrices).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A feature combination the implementation deliberately does not cover.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Training loss became non-finite. Maps to CLI exit code 3.
    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (checkpoint, CSV, trajectory file).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for divergence,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
