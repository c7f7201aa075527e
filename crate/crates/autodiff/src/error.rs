use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("missing attribute `{attr}` for primitive `{op}`")]
    MissingAttr { op: &'static str, attr: &'static str },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
