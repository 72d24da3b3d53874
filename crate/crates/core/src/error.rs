use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HagError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HagError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} is not on this tape")]
    NotOnTape(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: header declares {declared} bytes, {available} available")]
    Truncated { declared: u64, available: u64 },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training failed on slide {slide} at level {level}: {source}")]
    Training {
        slide: String,
        level: usize,
        #[source]
        source: Box<HagError>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HagError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HagError::Io { path: path.into(), source }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            HagError::ShapeMismatch { .. } => "shape_mismatch",
            HagError::DataLength { .. } => "data_length",
            HagError::NonFinite { .. } => "non_finite",
            HagError::LabelOutOfRange { .. } => "label_out_of_range",
            HagError::InvalidArgument(_) => "invalid_argument",
            HagError::NotScalar(_) => "not_scalar",
            HagError::NotOnTape(_) => "not_on_tape",
            HagError::Empty(_) => "empty",
            HagError::IndexOutOfRange { .. } => "index_out_of_range",
            HagError::BadMagic { .. } => "bad_magic",
            HagError::VersionMismatch { .. } => "version_mismatch",
            HagError::Truncated { .. } => "truncated",
            HagError::Checkpoint(_) => "checkpoint",
            HagError::Config(_) => "config",
            HagError::Io { .. } => "io",
            HagError::Training { .. } => "training",
            HagError::Json(_) => "json",
        }
    }
}
