use std::path::PathBuf;

use thiserror::Error;
use vpd_diff::DiffError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid depth {0}: must be finite and positive")]
    InvalidDepth(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("empty scene: {0}")]
    EmptyScene(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Coarse failure category, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Argument,
    Data,
    Numeric,
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Invalid(_) | Self::Config(_) => ErrorKind::Argument,
            Self::NonFinite(_) => ErrorKind::Numeric,
            Self::Diff(DiffError::NonFiniteGradient(_)) => ErrorKind::Numeric,
            Self::Diff(DiffError::Config(_)) => ErrorKind::Argument,
            _ => ErrorKind::Data,
        }
    }
}

/// Attaches a path to I/O failures.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}

impl<T> IoContext<T> for std::result::Result<T, DiffError> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| match e {
            DiffError::Io(source) => Error::io(path, source),
            DiffError::Format(m) => Error::data(format!("{}: {m}", path.display())),
            other => Error::Diff(other),
        })
    }
}
