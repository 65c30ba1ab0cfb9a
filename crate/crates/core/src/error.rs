use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward already ran on this graph; re-run the forward pass")]
    BackwardConsumed,

    #[error("node does not belong to this graph")]
    ForeignNode,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights are already split into frozen and fine-tuned copies")]
    AlreadySplit,

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("demonstrator failed to produce a collision-free episode after {0} attempts")]
    DemoRetriesExhausted(usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::BackwardConsumed => "backward_consumed",
            Error::ForeignNode => "foreign_node",
            Error::NotScalar(_) => "not_scalar",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::AlreadySplit => "already_split",
            Error::EpisodeFinished => "episode_finished",
            Error::DemoRetriesExhausted(_) => "demo_retries_exhausted",
            Error::Diverged(_) => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingFile(_) => "missing_file",
            Error::Malformed(_) => "malformed",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
