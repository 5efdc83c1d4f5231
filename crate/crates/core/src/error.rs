use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("row {row} is not a probability distribution (sum {sum}, min {min})")]
    NotADistribution { row: usize, sum: f64, min: f64 },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("parameter set {index} is not bound or has the wrong layout: {detail}")]
    BadParameterBinding { index: usize, detail: String },

    #[error("mixed partial not supported: {0}")]
    UnsupportedMixedPartial(String),

    #[error("memory buffer is empty")]
    EmptyBuffer,

    #[error("buffer item {0} has no stored logits")]
    MissingStoredLogits(u64),

    #[error("soft labels required but not supplied")]
    MissingSoftLabels,

    #[error("no learnable label entry for buffer item {0}")]
    MissingLabelEntry(u64),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
