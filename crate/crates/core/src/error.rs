use std::path::{Path, PathBuf};

use relight_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("truncated PFM payload: expected {expected} bytes at byte offset {offset}, found {found}")]
    PfmTruncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("PNG export failed: {0}")]
    Png(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mask empty after {attempts} crop attempts")]
    EmptyMask { attempts: usize },
    #[error("split overlap: {0}")]
    SplitOverlap(String),
    #[error("insufficient inputs: {0}")]
    Insufficient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

/// Failure class, used by the command line for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFinite(_) => ErrorKind::Numeric,
            Error::Io { .. }
            | Error::Json { .. }
            | Error::Pfm(_)
            | Error::PfmTruncated { .. }
            | Error::Png(_)
            | Error::Checkpoint(_)
            | Error::Dataset(_) => ErrorKind::Io,
            _ => ErrorKind::Usage,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
        move |source| Error::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
