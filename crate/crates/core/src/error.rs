use std::path::PathBuf;

use crate::io::checkpoint::CheckpointError;

/// Errors raised by the runtime.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A scalar parameter is out of its valid range (eps, beta, stride, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A configuration invariant does not hold.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed user input (image dimensions, token ids, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A caller violated an operation precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// The sequence would exceed the model context window.
    #[error("context overflow: {needed} tokens exceed max_seq {max_seq}")]
    ContextOverflow { needed: usize, max_seq: usize },

    /// Detokenizing hit an id that does not map to text.
    #[error("decode error: token id {0} is not a byte or known special")]
    Decode(u32),

    /// A dataset file produced no usable records.
    #[error("dataset error in {path}: {detail}")]
    Dataset { path: PathBuf, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
