use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("batch norm needs at least two elements per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("backward: {0}")]
    Backward(String),

    #[error("pruning removes every unit of layer {layer}")]
    Disconnection { layer: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("FLOP target {target:.4} unreachable: {reason}")]
    UnreachableFlopTarget { target: f64, reason: String },

    #[error("{path}: parse error at byte offset {offset}: {msg}")]
    Parse { path: PathBuf, offset: usize, msg: String },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
