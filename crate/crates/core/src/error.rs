use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GsanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GsanError {
    #[error("edge ({i}, {j}) has non-positive weight {weight}")]
    NonPositiveWeight { i: usize, j: usize, weight: f64 },

    #[error("index {index} out of range for dimension {bound}")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("edge ({i}, {j}) listed twice with conflicting weights {first} and {second}")]
    ConflictingDuplicateEdge {
        i: usize,
        j: usize,
        first: f64,
        second: f64,
    },

    #[error("self-loop on node {0}")]
    SelfLoop(usize),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("residual alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),

    #[error("wavelet order {order} exceeds bank maximum {max}")]
    OrderOutOfRange { order: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("channel list is empty")]
    EmptyChannelList,

    #[error("head list is empty")]
    EmptyHeadList,

    #[error("mask selects no nodes")]
    EmptyMask,

    #[error("label {label} at node {node} outside [0, {classes})")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        classes: usize,
    },

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite training loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("grid axis '{0}' is empty")]
    EmptyGrid(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {reason}", file.display())]
    ParseError {
        file: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("node {node} appears in both the {first} and {second} masks")]
    MaskOverlap {
        node: usize,
        first: &'static str,
        second: &'static str,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("graph has no edges")]
    NoEdges,

    #[error("invalid probability: {0}")]
    InvalidProbability(String),

    #[error("dataset fingerprint {actual} does not match checkpoint fingerprint {expected}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn mismatch(
    context: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> GsanError {
    GsanError::DimensionMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
