use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension {dim} too small, need at least {needed}")]
    InvalidDimension { dim: usize, needed: usize },

    #[error("(1 - alpha) * n = {exact} is not an integer (alpha = {alpha}, n = {n})")]
    InvalidAlpha { alpha: f64, n: usize, exact: f64 },

    #[error("augmentation factor k must be at least 1")]
    InvalidFactor,

    #[error("dataset is already augmented ({kind})")]
    AlreadyAugmented { kind: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeError { expected: usize, got: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("index {index} out of range for length {len}")]
    IndexError { index: usize, len: usize },

    #[error("gradient has zero Frobenius norm, rho_t = rho / ||grad||_F is undefined")]
    ZeroGradient,

    #[error("stratified batch split is not integral: {batch} * {block} / {size} = {exact}")]
    InvalidStrata {
        batch: usize,
        block: usize,
        size: usize,
        exact: f64,
    },

    #[error("out of regime: {0}")]
    OutOfRegime(String),

    #[error("requested noise set side is empty")]
    EmptySet,

    #[error("all values identical, 2-means clustering is degenerate")]
    DegenerateClustering,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
