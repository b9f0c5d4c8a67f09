use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty jet")]
    EmptyJet,
    #[error("non-physical particle {index}: {reason}")]
    NonPhysical { index: usize, reason: String },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid jet {jet}: {message}")]
    InvalidJet { jet: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("context empty after overlap removal")]
    EmptyContext,
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error at offset {offset}: {message}")]
    Checkpoint { offset: u64, message: String },
    #[error("{0}")]
    Internal(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
