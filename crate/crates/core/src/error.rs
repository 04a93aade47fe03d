use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: schema violation at `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("frame index {index} does not resolve (trace has {frames} frames)")]
    DanglingFrame { index: usize, frames: usize },

    #[error("tree depth {depth} exceeds configured maximum {max}")]
    DepthExceeded { depth: usize, max: usize },

    #[error("rpc connection failure: {0}")]
    Connection(String),

    #[error("unknown transaction {0}")]
    UnknownTransaction(String),

    #[error("node does not support trace method `{method}` (code {code}): {message}")]
    TraceUnsupported {
        method: String,
        code: i64,
        message: String,
    },

    #[error("rpc protocol error: {0}")]
    Rpc(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss in pack {pack}")]
    NonFiniteLoss { pack: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed data file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
