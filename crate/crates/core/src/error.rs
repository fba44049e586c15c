use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BicdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BicdError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("missing tape entry for {0}")]
    MissingTape(&'static str),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("coverage target unattainable for pair {index} after {attempts} attempts")]
    Coverage { index: usize, attempts: usize },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("missing counterpart for stem `{stem}`: {path}")]
    MissingCounterpart { stem: String, path: PathBuf },

    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),

    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BicdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BicdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            BicdError::Shape(_) => "shape",
            BicdError::Contract(_) => "contract",
            BicdError::NonFinite(_) => "non_finite",
            BicdError::MissingTape(_) => "missing_tape",
            BicdError::InvalidMask(_) => "invalid_mask",
            BicdError::Config(_) => "config",
            BicdError::Empty(_) => "empty",
            BicdError::Coverage { .. } => "coverage",
            BicdError::Format { .. } => "format",
            BicdError::MissingCounterpart { .. } => "missing_counterpart",
            BicdError::Checkpoint(_) => "checkpoint",
            BicdError::NonFiniteLoss { .. } => "non_finite_loss",
            BicdError::Io { .. } => "io",
        }
    }
}
