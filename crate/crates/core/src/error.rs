use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure kinds for checkpoint files. Each maps to a distinct on-disk defect.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"MMCK\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint config block: {0}")]
    MalformedConfig(String),
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} trailing bytes after the last parameter")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: id {id} out of range for size {size}")]
    IdOutOfRange {
        op: &'static str,
        id: usize,
        size: usize,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing visual features for example {0}")]
    MissingFeature(String),

    #[error("feature file: {0}")]
    FeatureFile(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("bpe model: {0}")]
    BpeModel(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
