use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FaceCycleError>;

#[derive(Debug, Error)]
pub enum FaceCycleError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error at {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("no frames found under {0}")]
    EmptyCorpus(PathBuf),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("backbone weights file missing: {0}")]
    MissingBackboneWeights(PathBuf),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{0}")]
    Other(String),
}

impl FaceCycleError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FaceCycleError::Io {
            path: path.into(),
            source,
        }
    }
}
