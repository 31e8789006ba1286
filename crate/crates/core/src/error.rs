use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PahError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    InsufficientBatch(usize),

    #[error("degenerate feature map: {0}")]
    DegenerateMap(String),

    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),

    #[error("degenerate descriptor: zero norm")]
    DegenerateDescriptor,

    #[error("k-means needs at least {k} points, got {points}")]
    InsufficientPoints { points: usize, k: usize },

    #[error("invalid head box: {0}")]
    InvalidBox(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PahError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(PahError::Dimension(msg.into()))
}
