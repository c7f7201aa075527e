use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] voxcal_autodiff::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimensions {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("depth map has no valid pixels")]
    AllMissing,
    #[error("{count} holes remain after {iters} dilation iterations")]
    HolesRemain { count: usize, iters: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss in {stage} at iteration {iteration}")]
    NumericFailure { stage: &'static str, iteration: usize },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
