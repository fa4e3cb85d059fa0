//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the malkit library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("XML parse error at line {line}, column {column}: {message}")]
    XmlParse {
        line: u32,
        column: u32,
        message: String,
    },

    #[error("invalid permission name {name:?}: {reason}")]
    InvalidPermissionName { name: String, reason: String },

    #[error("{file}, line {line}: {message}")]
    MalformedLine {
        file: String,
        line: usize,
        message: String,
    },

    #[error("sample {id:?} has no label in the label file")]
    UnlabeledSample { id: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vector length {got} does not match expected dimensionality {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("family {family:?} has {count} samples, fewer than k = {k}; group rare families first (group_rare_families)")]
    FamilyTooSmall {
        family: String,
        count: usize,
        k: usize,
    },

    #[error("training data must contain at least {needed} distinct classes, found {found}")]
    NotEnoughClasses { needed: usize, found: usize },

    #[error("training labels must be known families; found {0}")]
    InvalidTrainingLabel(String),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("all training samples share one label; no neighbor of a different family exists")]
    NoDistinctLabels,

    #[error("threshold was calibrated for model {expected}, but this model hashes to {got}")]
    ModelHashMismatch { expected: String, got: String },

    #[error("unsupported schema version {found:?} (supported major version: {supported})")]
    SchemaVersion { found: String, supported: u32 },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
