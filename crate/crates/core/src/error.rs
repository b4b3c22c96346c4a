//! Crate-wide error type.

use crate::{CategoryId, ImageId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: String,
    },

    #[error("invalid score {value}: must be finite and within [0, 1]")]
    InvalidScore { value: f64 },

    #[error("invalid image extent {width}x{height}: both sides must be at least 1")]
    InvalidExtent { width: u32, height: u32 },

    #[error("label space has no target categories")]
    EmptyLabelSpace,

    #[error("duplicate name {name:?} in label space")]
    DuplicateCategoryName { name: String },

    #[error("correlation undefined: {reason}")]
    UndefinedCorrelation { reason: String },

    #[error("embedding is degenerate: {reason}")]
    DegenerateEmbedding { reason: String },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("could not place {placed} of {requested} objects with the overlap cap after {attempts} attempts")]
    ScenePlacement {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("scoring backend error: {0}")]
    Backend(String),

    #[error("input for image {image_id} carries no scene geometry required by this backend")]
    SceneRequired { image_id: ImageId },

    #[error("category {category_id} is not a target of the mining label space")]
    LabelSpaceMismatch { category_id: CategoryId },

    #[error("dataset integrity: {reason}")]
    DatasetIntegrity { reason: String },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: JSON error at {json_path}: {message}")]
    JsonSchema {
        path: String,
        json_path: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Backend failure with a free-form message; public so external
    /// scoring backends can report errors through the shared type.
    pub fn backend(message: impl Into<String>) -> Self {
        Error::Backend(message.into())
    }
}
