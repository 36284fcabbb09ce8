use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the model pipeline.
#[derive(Debug, Error)]
pub enum DbtmError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A rank vector without variance; Spearman correlation is undefined.
    #[error("degenerate ranking: {0}")]
    Degenerate(String),

    #[error("vocabulary is empty after filtering (min_df={min_df}, max_df={max_df}, documents={documents})")]
    EmptyVocabulary {
        min_df: usize,
        max_df: usize,
        documents: usize,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint format version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("configuration: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DbtmError>;

impl DbtmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DbtmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or usage rather than internal faults.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            DbtmError::Io { .. }
                | DbtmError::Record { .. }
                | DbtmError::EmptyVocabulary { .. }
                | DbtmError::Config(_)
                | DbtmError::Json(_)
                | DbtmError::VersionMismatch { .. }
                | DbtmError::Checkpoint { .. }
        )
    }
}
