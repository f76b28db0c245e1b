use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the tagging pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("split `{0}` has no records")]
    EmptySplit(String),

    #[error("failed to decode audio for track `{track_id}`: {message}")]
    Decode { track_id: String, message: String },

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("corrupt cache file {path}: {message}")]
    CorruptCache { path: PathBuf, message: String },

    #[error("no cached {kind} features for track `{track_id}` (run `emotag extract` first)")]
    CacheMiss { track_id: String, kind: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("corrupt checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("missing {path} (produce it with `emotag {producer}`)")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Vocabulary(_) => "vocabulary",
            Error::Integrity(_) => "integrity",
            Error::EmptySplit(_) => "empty_split",
            Error::Decode { .. } => "decode",
            Error::TooShort(_) => "too_short",
            Error::CorruptCache { .. } => "corrupt_cache",
            Error::CacheMiss { .. } => "cache_miss",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Calibration(_) => "calibration",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint { .. } => "checkpoint",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::UnknownStrategy { .. } => "unknown_strategy",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
