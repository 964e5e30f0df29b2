use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error in sample `{sample}`, field `{field}`: {message}")]
    Validation {
        sample: String,
        field: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("predicate `{predicate}` has {available} training instances, {requested} requested")]
    InsufficientInstances {
        predicate: String,
        available: usize,
        requested: usize,
    },

    #[error("rule {rule} has infeasible geometry: {message}")]
    InfeasibleGeometry { rule: usize, message: String },

    #[error("non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("evaluation set is empty")]
    EmptyEvaluation,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(
        sample: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Validation {
            sample: sample.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input (files, flags, configs) rather
    /// than faults raised while computing.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse(_)
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::InsufficientInstances { .. }
                | Error::NotFound(_)
                | Error::Checkpoint(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
