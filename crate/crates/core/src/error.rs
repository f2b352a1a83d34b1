use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::capture::CaptureError;
use crate::fingerprint::FingerprintError;
use crate::offnet::ClassifyError;
use crate::probe::ProbeError;
use crate::scid::ScidError;
use crate::sim::SimError;
use crate::wire::WireError;

/// Crate-wide error, wrapping the per-module errors plus file handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{what} line {line}: {msg}")]
    Parse { what: &'static str, line: usize, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Scid(#[from] ScidError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(what: &'static str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { what, line, msg: msg.into() }
    }

    /// True for errors caused by data that does not satisfy an analysis
    /// precondition (too few samples and the like), as opposed to bad input.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::Fingerprint(FingerprintError::InsufficientData { .. })
                | Error::Scid(ScidError::InsufficientSamples { .. })
                | Error::Probe(ProbeError::EmptyHarvest)
                | Error::Probe(ProbeError::TooManyFailures { .. })
        )
    }
}
