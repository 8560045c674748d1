//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by dataset generation, model training, scoring, and the
/// staged pipeline. The CLI maps these onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad spec fields, unknown config keys, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Data violates a precondition (label out of range, size mismatch between
    /// paired inputs, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A single input argument is malformed (shape mismatch, out-of-range
    /// class index, non-finite value, empty score set).
    #[error("input error: {0}")]
    Input(String),

    /// Shape placement does not fit inside the image frame.
    #[error("placement error: {0}")]
    Placement(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Degenerate fit (e.g. zero residuals when calibrating the residual scale).
    #[error("fitting error: {0}")]
    Fitting(String),

    /// Checkpoint file is corrupt, truncated, or has an incompatible version
    /// or mode tag.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A pipeline stage was requested before its prerequisite completed.
    #[error("dependency error: stage '{stage}' is not complete (run it first)")]
    Dependency { stage: String },

    /// A prerequisite stage's artifact was produced under a different
    /// configuration than the current one.
    #[error("stale artifact: stage '{stage}' was built from a different config (re-run it)")]
    StaleArtifact { stage: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
