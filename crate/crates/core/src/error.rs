use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Variants are grouped so that a front-end can map them onto coarse exit
/// statuses with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}: no interaction records")]
    EmptyTable(PathBuf),
    #[error("domain alignment failed: {0}")]
    Alignment(String),
    #[error("split failed: {0}")]
    Split(String),
    #[error("empty evaluation set: {0}")]
    EmptyEvaluation(String),
    #[error("graph build failed: {0}")]
    GraphBuild(String),
    #[error("id out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Checkpoint,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorKind::Config,
            Error::Checkpoint(_) => ErrorKind::Checkpoint,
            Error::Numeric(_) | Error::Shape(_) => ErrorKind::Numeric,
            Error::Parse { .. }
            | Error::EmptyTable(_)
            | Error::Alignment(_)
            | Error::Split(_)
            | Error::EmptyEvaluation(_)
            | Error::GraphBuild(_)
            | Error::Range(_)
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
