use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a type invariant or an operation precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A required field is absent from a study or request.
    #[error("missing field `{0}`")]
    MissingField(&'static str),

    /// An entry of a candidates/truth file does not follow the schema.
    #[error("entry {index}: field `{field}`: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },

    /// Stored bytes do not match their recorded checksum or declared layout.
    #[error("integrity check failed for {path}: {message}")]
    Integrity { path: PathBuf, message: String },

    #[error("study `{0}` not found")]
    NotFound(String),

    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
