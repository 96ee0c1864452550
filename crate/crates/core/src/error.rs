use thiserror::Error;

/// Errors produced by the style-transfer pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported image format (expected PNG or JPEG)")]
    UnsupportedFormat,
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("range mismatch: expected {expected}, found {found}")]
    RangeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("missing tensor: {0}")]
    MissingTensor(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown layer: {0}")]
    UnknownLayer(String),
    #[error("loss diverged at iteration {iteration}")]
    DivergedLoss { iteration: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid blend weights: {0}")]
    InvalidWeights(String),
    #[error("stylization strength {0} outside [0, 1]")]
    InvalidStrength(f64),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("weight archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
