use thiserror::Error;

/// Failures raised by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("softmax_cross_entropy: label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape { op, detail: detail.into() }
    }
}

/// Checkpoint decoding failures; each is distinct so callers can react.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("manifest/payload mismatch: {0}")]
    Manifest(String),

    #[error("payload checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),
}

/// Top-level error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid scale parameter {0} (must lie in [0, 1])")]
    InvalidScale(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Divergence { epoch: usize, iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
