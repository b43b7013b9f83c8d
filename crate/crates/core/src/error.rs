use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("spatial dim {axis} = {len} is not divisible by {divisor}")]
    NotDivisible {
        axis: &'static str,
        len: usize,
        divisor: usize,
    },

    #[error("batch norm '{0}' has no running statistics")]
    UninitializedStats(String),

    #[error("backward requested without saved forward context for node {0}")]
    MissingContext(usize),

    #[error("missing parameter '{0}'")]
    MissingParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("volume format: {0}")]
    Format(String),

    #[error("unsupported {field}: {value}")]
    Unsupported { field: &'static str, value: String },

    // The io error is part of the message, not a chained source, so it is
    // printed once by callers that walk the chain.
    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
