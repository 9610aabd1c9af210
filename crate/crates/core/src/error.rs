use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {name}: {message}")]
    Decode { name: String, message: String },

    #[error("failed to encode image {name}: {message}")]
    Encode { name: String, message: String },

    #[error("missing mask for image `{0}`")]
    MissingMask(String),

    #[error("mask `{0}` has no matching image")]
    OrphanMask(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("label out of range in `{id}`: found {label}, max allowed {max}")]
    LabelOutOfRange { id: String, label: u8, max: u8 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class weight for label {label} must be positive, got {weight}")]
    NonPositiveWeight { label: u8, weight: f64 },

    #[error("crop {crop_h}x{crop_w} larger than source {src_h}x{src_w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        src_h: usize,
        src_w: usize,
    },

    #[error("poisson solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("defect mask of `{0}` is empty")]
    EmptyDefect(String),

    #[error("no eligible source sample for any minority class")]
    NoEligibleSource,

    #[error("class {class}: needs {needed} samples, only {available} available")]
    InsufficientSamples {
        class: u8,
        needed: usize,
        available: usize,
    },

    #[error("classes {0:?} share too many samples for disjoint support and query sets")]
    OverlappingClasses(Vec<u8>),

    #[error("requested {requested} classes per episode, dataset has {available}")]
    NotEnoughClasses { requested: usize, available: usize },

    #[error("empty prototype: class {0} has no pixels in any shot")]
    EmptyPrototype(u8),

    #[error("x = {x} outside spline domain [{lo}, {hi}]")]
    OutsideDomain { x: f64, lo: f64, hi: f64 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the environment or input data rather than
    /// by caller-supplied parameters.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::InvalidArgument(_) | Error::CropTooLarge { .. } | Error::NotEnoughClasses { .. }
        )
    }
}
