use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value showed up during training or inference; `stage` names the term.
    #[error("non-finite value in {stage}: {message}")]
    NonFinite { stage: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("png error: {0}")]
    Png(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn non_finite(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::NonFinite {
            stage: stage.into(),
            message: message.into(),
        }
    }
}
