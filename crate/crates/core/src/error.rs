use thiserror::Error;

/// Errors produced anywhere in the edge-alignment stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation cannot be expressed with Cayley parameters (180 degree rotation)")]
    CayleySingular,
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("gradient direction is undefined for a zero vector")]
    UndefinedDirection,
    #[error("invalid Canny thresholds: low = {low}, high = {high}")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("cannot build a field from an empty edge set")]
    EmptyField,
    #[error("pixel ({0}, {1}) is outside the field")]
    OutOfBounds(f64, f64),
    #[error("insufficient overlap: {valid} valid residuals, need at least {required}")]
    InsufficientOverlap { valid: usize, required: usize },
    #[error("normal equations are rank deficient (eigenvalue ratio {ratio:e})")]
    RankDeficient { ratio: f64 },
    #[error("sensor model fit failed: {0}")]
    Fit(String),
    #[error("reference model is empty")]
    EmptyModel,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
