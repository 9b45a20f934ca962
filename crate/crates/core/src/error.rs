use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spatial dims {height}x{width} are not divisible by window {window}")]
    NonDivisibleSpatialDims {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("non-finite value in output of {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{channels} attention channels are not divisible by {heads} heads")]
    HeadDivisibility { channels: usize, heads: usize },

    #[error("spatial size {size} at {at} is smaller than window {window}")]
    SpatialTooSmall {
        at: String,
        size: usize,
        window: usize,
    },

    #[error("input image values must lie in [0, 1]")]
    InvalidInputRange,

    #[error("patch size {patch} exceeds image size {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("cannot draw distinct patch corners: {0}")]
    DegeneratePatchGrid(String),

    #[error("view 3 needs at least one other ground-truth image")]
    MissingOtherGroundtruth,

    #[error("contrastive batch has no positives")]
    EmptyPositives,

    #[error("invalid degradation spec: {0}")]
    InvalidSpec(String),

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint does not match model config: {0}")]
    ConfigMismatch(String),

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
