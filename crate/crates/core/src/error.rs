use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
    #[error("invalid pose: {0}")]
    Pose(String),
    #[error("degenerate bone {bone}: zero length")]
    DegenerateBone { bone: usize },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: total loss {total:e}")]
    Diverged { epoch: usize, total: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
