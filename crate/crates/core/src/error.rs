use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at node {node}: {msg}")]
    Shape { node: String, msg: String },

    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NotScalar { node: String, shape: Vec<usize> },

    #[error("unbound leaf {0}")]
    Unbound(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not a tensor file")]
    NotATensorFile,

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("loss became non-finite at step {step}")]
    NanLoss { step: usize },

    #[error("missing artifact for stage {stage}: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
