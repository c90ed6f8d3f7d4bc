use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes, bad hyperparameters, plan/variant mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    /// Values that violate a data contract (label out of range, empty dataset).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// API misuse by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr})")]
    Diverged { epoch: usize, batch: usize, lr: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
