//! Crate-wide error type. Variants map one-to-one onto the failure modes the
//! public API contracts promise: domain violations, shape mismatches, config
//! validation, training divergence, and store/report bookkeeping.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An array had the wrong shape for the operation.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// A timestep index was outside the schedule.
    #[error("timestep {t} out of range for schedule of length {t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    /// A config value failed validation; the message names the offending key.
    #[error("invalid config: {0}")]
    Config(String),

    /// An internal invariant the caller cannot trigger was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An optimization loop produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },

    /// Training failed to reach the minimum acceptable quality.
    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    /// A claim check needed a grid cell that is not in the store.
    #[error("missing grid cell: {0}")]
    MissingCell(String),

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Filesystem failure, tagged with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an io error with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
