use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unexpected end of file")]
    UnexpectedEof,
    #[error("image dimensions must be positive")]
    NonPositiveDimensions,
    #[error("pixel buffer does not match the image dimensions")]
    DimensionMismatch,
    #[error("invalid environment map: {0}")]
    InvalidEnvironment(String),
    #[error("codec error: {0}")]
    Codec(#[from] image::ImageError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("SDF gradient vanishes at the query point")]
    DegenerateGradient,
    #[error("interior march found no exit")]
    NoExit,
    #[error("no sign change of the field inside the grid")]
    EmptyLevelSet,
    #[error("grid resolution {0} outside [16, 512]")]
    InvalidResolution(usize),
    #[error("invalid shape description: {0}")]
    InvalidShape(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error on {path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { step: usize, component: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("evaluation mask selects no pixels")]
    ZeroPixelMask,
    #[error("image smaller than the 11x11 SSIM window")]
    ImageTooSmall,
    #[error("inputs have different lengths or dimensions")]
    LengthMismatch,
    #[error("point set is empty")]
    EmptySet,
}

/// Raw direction output of the ray-bending network collapsed to zero.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("ray-bending network produced a degenerate direction")]
pub struct DegenerateDirection;
