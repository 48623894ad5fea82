use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("expected value range {expected}, found {found}")]
    WrongRange { expected: String, found: String },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed array file: {0}")]
    ArrayHeader(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("requested {requested} atoms but the data only supports {available}")]
    InsufficientRank { requested: usize, available: usize },

    #[error("{stage} diverged at {at}: loss is not finite")]
    Divergence { stage: &'static str, at: String },

    #[error("zero variance in {0}")]
    ZeroVariance(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("{0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch { expected: expected.to_string(), found: found.to_string() }
    }
}
