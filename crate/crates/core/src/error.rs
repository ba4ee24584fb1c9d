use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input violated a documented precondition of a loss or metric.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("snapshot mismatch: {0}")]
    Snapshot(String),

    #[error("non-finite loss at task {task}, step {step}: {detail}")]
    NumericAbort { task: usize, step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
