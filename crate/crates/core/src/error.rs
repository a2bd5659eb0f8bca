//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x0}, {y0}, {x1}, {y1}): corners must be finite with x0 < x1 and y0 < y1")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("region has no overlap with the image bounds")]
    DegenerateRegion,

    #[error("scene has no ground-truth objects")]
    NoGroundTruth,

    #[error("action index {0} out of range (valid: 0..=5)")]
    InvalidAction(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no cached activations; run a train-mode forward first")]
    StaleCache,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("replay memory holds {have} experiences, batch needs {need}")]
    InsufficientExperiences { have: usize, need: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("infeasible object placement: {0}")]
    InfeasiblePlacement(String),

    #[error("parse error in {file}: {msg}")]
    Parse { file: String, msg: String },

    #[error("missing image file: {0}")]
    MissingImage(String),

    #[error("hierarchy enumeration of {nodes} nodes exceeds cap of {cap}")]
    TreeTooLarge { nodes: usize, cap: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Parse { .. }
            | Error::MissingImage(_)
            | Error::EmptyDataset
            | Error::Format(_)
            | Error::InfeasiblePlacement(_)
            | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
