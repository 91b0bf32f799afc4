use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the conformal pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid calibration map: {0}")]
    Map(String),

    #[error("invalid score: {0}")]
    Score(String),

    #[error("invalid alpha {0}: must lie in (0, 1)")]
    Alpha(f64),

    #[error("empty score list")]
    EmptyScores,

    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassMismatch { expected: usize, found: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid rank bins: {0}")]
    Bins(String),

    #[error(
        "threshold is include_all on {n} samples at alpha {alpha}; \
         use a larger tau split (need n >= {needed})"
    )]
    ThresholdDegenerate { n: usize, alpha: f64, needed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn row(row: usize, message: impl Into<String>) -> Self {
        Error::Row {
            row,
            message: message.into(),
        }
    }

    /// True when the failure came from the file system rather than from
    /// invalid content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
