use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("caption is {len} characters, limit is {limit}")]
    CaptionTooLong { len: usize, limit: usize },

    #[error("schema violation in `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("`{field}` references undeclared object `{object}`")]
    UndeclaredObject { field: String, object: String },

    #[error("phrase `{0}` is not in the vector table")]
    MissingPhrase(String),

    #[error("vector table {path}: {reason}")]
    VectorTable { path: PathBuf, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
