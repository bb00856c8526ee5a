//! Errors of the end-to-end pipeline: training, checkpoints, generation and
//! optimization.

use thiserror::Error;

use crate::flowcore::FlowError;
use crate::molgraph::MolError;
use crate::numerics::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error("noise scale {0} outside (0, 1)")]
    BadNoiseScale(f64),
    #[error("temperature {0} outside (0, 2]")]
    BadTemperature(f64),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("checkpoint format {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("parameter blob holds {found} bytes, manifest needs {expected}")]
    CorruptBlob { expected: usize, found: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("fingerprint needs a non-empty connected molecule")]
    InvalidMolecule,
    #[error("fingerprint widths {0} and {1} differ")]
    WidthMismatch(usize, usize),
    #[error("unknown scorer {0:?}")]
    UnknownScorer(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Flow(e.into())
    }
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
