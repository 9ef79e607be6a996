use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema violation: {message}")]
    SchemaViolation { line: usize, message: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("identity {identity}: inconsistent value for identity-level category `{category}`")]
    Consistency { identity: u64, category: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("length mismatch: {left} records vs {right} captions")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid caption: {0}")]
    Caption(String),

    #[error("rendering error: {0}")]
    Render(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("caption of {len} tokens exceeds max length {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("checkpoint version {found} cannot be loaded (expected {expected})")]
    Migration { found: u32, expected: u32 },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
