use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("invalid label for entry `{entry}`: {msg}")]
    Label { entry: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenRange { id: usize, size: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("non-finite loss on batch [{}]", source_ids.join(", "))]
    NonFiniteLoss { source_ids: Vec<String> },

    #[error("failed to decode image {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Metric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
