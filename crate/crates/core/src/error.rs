use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer {index} ({kind}): {detail}")]
    Layer {
        index: usize,
        kind: &'static str,
        detail: String,
    },

    #[error("backward called before a forward pass produced node {0}")]
    BackwardBeforeForward(usize),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file, needed {needed} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: length {len} is not a multiple of the record size {record} (trailing record starts at offset {offset})")]
    BadRecordLength {
        path: PathBuf,
        len: usize,
        record: usize,
        offset: usize,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("calibration bracket invalid for {what}: drop at the upper end is {drop_at_max:.4} < target {target:.4}; raise the endpoint constant")]
    InvalidBracket {
        what: String,
        drop_at_max: f64,
        target: f64,
    },

    #[error("missing calibration for {0}")]
    MissingCalibration(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
