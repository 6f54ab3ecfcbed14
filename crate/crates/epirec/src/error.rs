//! Crate-wide error type.
//!
//! Errors are split into two families so the CLI can map them onto exit
//! codes: `Validation` problems (bad shapes, bad configs, missing files)
//! and `Numerical` problems (NaN iterates, singular systems, divergence).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Input rejected before any numerics ran: shape mismatch, invalid
    /// configuration, missing array, malformed manifest.
    #[error("validation: {0}")]
    Validation(String),

    /// The numerics went wrong mid-flight: non-finite values, singular
    /// operator, diverging optimization.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI: 1 for validation-class failures,
    /// 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
