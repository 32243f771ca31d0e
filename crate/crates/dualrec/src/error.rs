//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or plane shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Non-finite values or degenerate numeric inputs.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration value(s). Collects every bad key at once.
    #[error("config error: {0}")]
    Config(String),

    /// Caller misuse of an API (wrong arity, missing prerequisite).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data failed validation (non-rigid pose, bad manifest, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// No exact opposite-view partner exists.
    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("decode error: {0}")]
    Decode(String),
}

impl Error {
    /// Process exit code for the CLI: 2 usage, 3 validation/config, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) | Error::Validation(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
