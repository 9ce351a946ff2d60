use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("bad STFT config: {0}")]
    BadStftConfig(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid mask parameters: {0}")]
    InvalidMask(String),
    #[error("cost not convex: alpha = {0} must be > 1/2")]
    CostNotConvex(f64),
    #[error("invalid cost parameters: {0}")]
    InvalidCost(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("unsupported wav format: {0}")]
    UnsupportedWav(String),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment error: {0}")]
    Experiment(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
