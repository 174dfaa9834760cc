use std::path::PathBuf;

use crate::artifact::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] lpb_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

impl Error {
    /// Stable short name used in one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(f) => f.kind(),
            Error::Core(lpb_core::Error::Shape { .. }) => "shape",
            Error::Core(lpb_core::Error::Contract(_)) => "contract",
            Error::Core(lpb_core::Error::Numeric(_)) => "numeric",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::MissingArtifact(_) => "missing-artifact",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
