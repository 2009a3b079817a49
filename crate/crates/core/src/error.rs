use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("validation failed for record `{id}`: {reason}")]
    Record { id: String, reason: String },

    #[error("description bank: {0}")]
    Descriptions(String),

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn record(id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Record {
            id: id.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "INVALID_INPUT",
            Error::Shape { .. } => "SHAPE_MISMATCH",
            Error::Config(_) => "INVALID_CONFIG",
            Error::Record { .. } => "INVALID_RECORD",
            Error::Descriptions(_) => "INVALID_DESCRIPTIONS",
            Error::LabelMismatch(_) => "LABEL_MISMATCH",
            Error::Divergence { .. } => "DIVERGENCE",
            Error::Checkpoint(_) => "INVALID_CHECKPOINT",
            Error::Io { .. } => "IO",
            Error::Json { .. } => "PARSE",
            Error::Toml { .. } => "PARSE",
            Error::Csv(_) => "IO",
        }
    }
}
