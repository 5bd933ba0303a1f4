use std::path::PathBuf;

use thiserror::Error;

use crate::detector::SprtState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input has {found} features, network expects {expected}")]
    InputShape { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: bad magic number {found:#010x} (expected {expected:#010x})", path.display())]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{}: truncated at offset {offset}, needed {needed} more bytes", path.display())]
    Truncated {
        path: PathBuf,
        offset: u64,
        needed: u64,
    },

    #[error("{}: malformed header at offset {offset}: {reason}", path.display())]
    Header {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{} holds {images} images but {} holds {labels} labels", images_path.display(), labels_path.display())]
    CountMismatch {
        images_path: PathBuf,
        labels_path: PathBuf,
        images: usize,
        labels: usize,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("pool generation failed: admitted {admitted} of {requested} after {attempts} attempts (admission rate {admission_rate:.4})")]
    PoolGenerationFailed {
        requested: usize,
        admitted: usize,
        attempts: u64,
        admission_rate: f64,
    },

    #[error("pool integrity check failed: {0}")]
    PoolIntegrity(String),

    #[error("normal-sample LCR upper bound is zero; use a larger pool or a higher mutation rate")]
    DegenerateCalibration,

    #[error("LCR distance undefined: normal mean LCR is zero (infinite separation)")]
    UndefinedDistance,

    #[error("mutant source exhausted after {} mutants ({} label changes) before a decision", .state.n, .state.z)]
    PoolTooSmall { state: SprtState },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
