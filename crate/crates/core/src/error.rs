use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VsimError>;

#[derive(Debug, Error)]
pub enum VsimError {
    #[error("line {line}: field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },

    #[error("region `{region}` of image `{image}` has no gt_label (required in training mode)")]
    MissingGtLabel { image: String, region: String },

    #[error("region `{region}` of image `{image}` has neither a feature vector nor a bag")]
    MissingObservation { image: String, region: String },

    #[error("corpus is invalid: {0}")]
    InvalidCorpus(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("feature space `{0}` is not present in the corpus")]
    UnknownSpace(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty bag of labels{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    EmptyBag { context: Option<String> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("enumeration space of {size} states exceeds the limit of {limit}")]
    InstanceTooLarge { size: f64, limit: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no relevant items")]
    NoRelevantItems,

    #[error("vocabulary mismatch: expected hash {expected}, found {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Ingestion,
    ModelMismatch,
    Numerical,
    Other,
}

impl VsimError {
    pub fn class(&self) -> ErrorClass {
        match self {
            VsimError::Schema { .. }
            | VsimError::MissingGtLabel { .. }
            | VsimError::MissingObservation { .. }
            | VsimError::InvalidCorpus(_)
            | VsimError::EmptyCorpus
            | VsimError::UnknownSpace(_)
            | VsimError::DimensionMismatch { .. }
            | VsimError::EmptyBag { .. }
            | VsimError::Io(_)
            | VsimError::Json(_) => ErrorClass::Ingestion,
            VsimError::VocabularyMismatch { .. } => ErrorClass::ModelMismatch,
            VsimError::Numerical(_) | VsimError::InstanceTooLarge { .. } => ErrorClass::Numerical,
            VsimError::InvalidParameter(_)
            | VsimError::LengthMismatch { .. }
            | VsimError::NoRelevantItems => ErrorClass::Other,
        }
    }
}
