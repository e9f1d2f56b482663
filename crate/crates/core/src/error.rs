//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("clip for trial {trial_id} out of range: onset {onset} + delay {delay} + length {length} > {n_tr}")]
    ClipOutOfRange {
        trial_id: String,
        onset: usize,
        delay: usize,
        length: usize,
        n_tr: usize,
    },

    #[error("unknown network label `{0}`")]
    UnknownNetwork(String),

    #[error("unknown feature extractor `{0}`")]
    UnknownExtractor(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined statistic: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path} (run stage `{stage}` first)")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("run directory is locked by another writer: {0}")]
    Locked(PathBuf),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownNetwork(_) | Error::UnknownExtractor(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numerical(_) | Error::Degenerate(_) => 4,
            _ => 1,
        }
    }
}
