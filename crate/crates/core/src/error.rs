use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("invalid architecture `{arch}`: {reason}")]
    InvalidArch { arch: String, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{0}` is not a prunable convolution")]
    NotPrunable(String),
    #[error("filter index {index} out of range for layer `{layer}` with {count} filters")]
    FilterIndex { layer: String, index: usize, count: usize },
    #[error("duplicate filter index {index} for layer `{layer}`")]
    DuplicateIndex { layer: String, index: usize },
    #[error("removing {removing} of {count} channels would empty layer `{layer}`")]
    LayerCollapse { layer: String, removing: usize, count: usize },
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),
    #[error("criterion {criterion} is inapplicable to layer `{layer}`: {reason}")]
    CriterionInapplicable { criterion: String, layer: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("baseline FLOPs are zero")]
    ZeroFlops,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
