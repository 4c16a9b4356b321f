//! Error type shared across the library.

use thiserror::Error;

/// Everything that can go wrong when assembling batches, training, or
/// running experiments.
///
/// Variants are grouped by who is at fault: `Usage` means the caller
/// violated an API precondition (dimension mismatch, empty batch, bad
/// hyperparameter), `Format` means an on-disk artifact could not be parsed,
/// `EnvContract` means an environment specification is internally
/// inconsistent, and `Training` means learning itself broke down (e.g. a
/// non-finite loss that persisted).
#[derive(Debug, Error)]
pub enum BrlError {
    /// Caller violated a precondition of the API.
    #[error("usage: {0}")]
    Usage(String),

    /// A batch file, checkpoint, config, or environment spec failed to parse
    /// or failed validation after parsing.
    #[error("format: {0}")]
    Format(String),

    /// An environment specification is inconsistent (rows don't sum to one,
    /// dangling state indices, non-episodic with gamma = 1, ...).
    #[error("environment contract: {0}")]
    EnvContract(String),

    /// Training failed in a way that retrying the same call would not fix.
    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Shorthand used throughout the crate.
pub type Result<T> = std::result::Result<T, BrlError>;

impl BrlError {
    /// Convenience constructor for precondition violations.
    pub fn usage(msg: impl Into<String>) -> Self {
        BrlError::Usage(msg.into())
    }

    /// Convenience constructor for malformed artifacts.
    pub fn format(msg: impl Into<String>) -> Self {
        BrlError::Format(msg.into())
    }
}
