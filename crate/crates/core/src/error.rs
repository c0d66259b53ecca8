use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the trigger pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error for `{id}`: {message}")]
    Ingestion { id: String, message: String },

    #[error("validation error for `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("placement error: {0}")]
    Placement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("plot error: {0}")]
    Plot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn argument(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }
}
