use std::path::PathBuf;

use crate::oracle::RegionRef;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unpaired file: {0}")]
    UnpairedFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate direction: zero-norm {0}")]
    DegenerateDirection(&'static str),

    #[error("numerical divergence in {0}")]
    NumericalDivergence(&'static str),

    #[error("already labeled: image {} region {}", .0.image, .0.region)]
    AlreadyLabeled(RegionRef),

    #[error("pool exhausted: no eligible region left to query")]
    PoolExhausted,

    #[error("empty pixel sample")]
    EmptySample,

    #[error("no evaluable class")]
    NoEvaluableClass,
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
