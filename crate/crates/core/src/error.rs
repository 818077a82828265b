use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Substrate(#[from] iclp_substrate::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("could not parse model response: {message}")]
    Parse { message: String, raw: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch { what: String, expected: String, found: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: String },
    #[error("output directory is locked by another run ({0})")]
    Locked(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
