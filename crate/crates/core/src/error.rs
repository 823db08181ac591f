//! Error type shared by every module in the crate. Variants carry enough
//! context (op names, shapes, offsets) that a failure message alone pins
//! down the faulty call site.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss node {node} already consumed by a previous backward in this forward pass")]
    GraphConsumed { node: usize },

    #[error("sgd_step: no gradient accumulated for parameter '{name}'")]
    MissingGradient { name: String },

    #[error("non-finite loss ({value}) during {context}")]
    NonFiniteLoss { value: f64, context: String },

    #[error("gradient check failed for {op}: max relative error {max_rel_err:e} at parameter index {index} (analytic {analytic:e}, numeric {numeric:e})")]
    GradCheckFailed {
        op: String,
        max_rel_err: f64,
        index: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("unknown parameter id {id}")]
    UnknownParam { id: usize },

    #[error("unknown layer id {id}")]
    UnknownLayer { id: usize },

    #[error("layer {id} is not a conv layer, cannot {action}")]
    NotConvLayer { id: usize, action: String },

    #[error("filter index {index} out of range for layer {layer} ({count} filters)")]
    FilterOutOfRange {
        index: usize,
        layer: usize,
        count: usize,
    },

    #[error("empty {what}")]
    EmptyInput { what: String },

    #[error("adversarial probe has not been fitted on this model; fit it before the ablation study")]
    UntrainedProbe,

    #[error("requested top {k} conv layers but the model has only {available}")]
    TooFewConvLayers { k: usize, available: usize },

    #[error("checkpoint does not match model: {detail}")]
    CheckpointMismatch { detail: String },

    #[error("bad checkpoint at byte {offset}: {detail}")]
    BadCheckpoint { offset: u64, detail: String },

    #[error("bad manifest {path}: {detail}")]
    BadManifest { path: String, detail: String },

    #[error("bad dataset file {path}: {detail}")]
    BadDataset { path: String, detail: String },

    #[error("reference group {group} not present in the evaluated data")]
    UnknownReferenceGroup { group: usize },

    #[error("{what} needs both a positive and a negative label")]
    SingleClassInput { what: String },

    #[error("{what} needs at least {min} patients, got {got}")]
    TooFewPatients { what: String, min: usize, got: usize },

    #[error("invalid config: {detail}")]
    InvalidConfig { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad json in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
