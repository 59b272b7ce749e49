use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segfield core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed {what} in {path}: {detail}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("view {view}: missing pose entry")]
    MissingPose { view: String },

    #[error("view {view}: label map is {label_w}x{label_h} but image is {image_w}x{image_h}")]
    LabelSizeMismatch {
        view: String,
        label_w: u32,
        label_h: u32,
        image_w: u32,
        image_h: u32,
    },

    #[error("view {view}: label value {value} out of range (class count {class_count})")]
    LabelOutOfRange {
        view: String,
        value: u8,
        class_count: usize,
    },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("pixel ({x}, {y}) outside image bounds {width}x{height}")]
    PixelOutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("ray pool {pool} selects no views")]
    EmptyRayPool { pool: String },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("feature backend {backend} unavailable: {detail}; rerun with the stub backend (`--backend stub`)")]
    BackendUnavailable { backend: String, detail: String },

    #[error("feature cache entry {path} is corrupt: {detail}")]
    CorruptCache { path: PathBuf, detail: String },

    #[error("feature lookup ({x}, {y}) outside source image {width}x{height}")]
    LookupOutOfBounds {
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },

    #[error("no valid class centroids (every class had zero labeled pixels)")]
    NoValidCentroids,

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimMismatch { expected: usize, got: usize },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite loss at iteration {iteration}; diagnostic batch dumped to {dump}")]
    NonFiniteLoss { iteration: u64, dump: PathBuf },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing pseudo labels for view {view}; run `pseudo-label` first")]
    MissingPseudoLabels { view: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty confusion matrix (no non-ignore pixels accumulated)")]
    EmptyConfusion,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
