use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or hyperparameter value outside its valid domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Caller-supplied data violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// Ranking metric requested against an empty gold set.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("refinement failed: {0}")]
    Refinement(String),

    #[error("resume failed ({}): {message}", file.display())]
    Resume { file: PathBuf, message: String },

    #[error("trainer failed: {0}")]
    Trainer(String),

    #[error(transparent)]
    Lm(#[from] crate::lm_client::LmError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
