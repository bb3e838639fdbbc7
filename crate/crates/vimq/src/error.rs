use std::io;
use std::path::PathBuf;

use thiserror::Error;
use vimq_core::model::ModelError;
use vimq_core::quantizer::QuantError;
use vimq_core::reparam::ReparamError;
use vimq_core::tensor::{QtenError, TensorError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Qten {
        path: PathBuf,
        #[source]
        source: QtenError,
    },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: sha256 {actual} does not match manifest entry {expected}", path.display())]
    Digest {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for anything that failed while reading or
    /// writing files, 4 for model, config and numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. }
            | Error::Qten { .. }
            | Error::Json { .. }
            | Error::Digest { .. }
            | Error::Manifest { .. }
            | Error::Csv(_) => EXIT_IO,
            Error::Model(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Model(e.into())
    }
}

impl From<QuantError> for Error {
    fn from(e: QuantError) -> Self {
        Error::Model(e.into())
    }
}

impl From<ReparamError> for Error {
    fn from(e: ReparamError) -> Self {
        Error::Model(e.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
