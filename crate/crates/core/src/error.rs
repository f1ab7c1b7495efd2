use std::io;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("batch norm in train mode needs at least 2 values per channel, got batch {batch} of shape {shape}")]
    BatchTooSmall { batch: usize, shape: Shape },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called on node {node} before it was computed by a forward pass")]
    BackwardBeforeForward { node: usize },

    #[error("loss node {node} is not scalar (shape {shape})")]
    NonScalarLoss { node: usize, shape: Shape },

    #[error("missing feed for {0}")]
    MissingFeed(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("RLA stage {stage}, block {block}: {detail}")]
    Aggregation {
        stage: usize,
        block: usize,
        detail: String,
    },

    #[error("shared conv index {index} exceeds bank size {size}")]
    BankExhausted { index: usize, size: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("model has no shared convolutions")]
    NoSharedConvs,

    #[error("ARMA model is not invertible: |gamma| = {0} >= 1")]
    NotInvertible(f64),

    #[error("{0}")]
    Fit(String),

    #[error("non-finite loss; first non-finite value produced by node {node} ({name})")]
    NonFinite { node: usize, name: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
