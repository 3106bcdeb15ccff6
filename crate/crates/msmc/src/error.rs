//! Error taxonomy shared by the whole crate.
//!
//! The CLI maps these onto process exit codes: configuration problems
//! exit with 2, training divergence with 3, everything else with 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structurally invalid configuration (bad stage counts, indivisible
    /// dims, unknown keys, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation contract (shape mismatch, index out
    /// of range, value not a codebook member).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid input data (non-finite values, empty sequences).
    #[error("input error: {0}")]
    Input(String),

    /// On-disk format problems: bad magic, truncated payload, version skew.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint/config fingerprints that are required to match do not.
    #[error("fingerprint mismatch: {0}")]
    Mismatch(String),

    /// A loss term became non-finite during training.
    #[error("training diverged: {term} = {value}")]
    Divergence { term: String, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
