use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of the file formats, pipelines and command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] neurogen_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    /// A file exists but violates its format contract.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    /// The remote embedding service failed or answered out of protocol.
    #[error("embedding provider error: {0}")]
    Provider(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit status of the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 2,
    Data = 3,
    Numeric = 4,
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Error {
        Error::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }

    pub fn exit_kind(&self) -> ExitKind {
        use neurogen_core::Error as C;
        match self {
            Error::Config(_) => ExitKind::Config,
            Error::Core(C::Config(_)) => ExitKind::Config,
            Error::Core(C::Numeric(_)) => ExitKind::Numeric,
            _ => ExitKind::Data,
        }
    }

    /// Short category used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        use neurogen_core::Error as C;
        match self {
            Error::Core(e) => match e {
                C::Shape(_) => "shape",
                C::Config(_) => "config",
                C::Index(_) => "index",
                C::Numeric(_) => "numeric",
                C::Data(_) => "data",
                C::Lookup(_) => "lookup",
                C::State(_) => "state",
                C::Metric(_) => "metric",
                C::Montage(_) => "montage",
                C::Compatibility(_) => "compatibility",
            },
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Provider(_) => "provider",
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
