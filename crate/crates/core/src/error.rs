use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MtdmlError>;

#[derive(Debug, Error)]
pub enum MtdmlError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {term}")]
    Numeric { term: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing capability: {0}")]
    Capability(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl MtdmlError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        MtdmlError::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn numeric(term: impl Into<String>) -> Self {
        MtdmlError::Numeric { term: term.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MtdmlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool: 2 config, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            MtdmlError::Config(_)
            | MtdmlError::Dimension { .. }
            | MtdmlError::Capability(_)
            | MtdmlError::Degenerate(_) => 2,
            MtdmlError::Io { .. } | MtdmlError::Parse { .. } | MtdmlError::Serde(_) => 3,
            MtdmlError::Numeric { .. } | MtdmlError::Domain(_) | MtdmlError::State(_) => 4,
        }
    }
}
