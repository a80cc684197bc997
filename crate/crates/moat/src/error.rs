use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },

    #[error("invalid config: {0}")]
    Invalid(#[source] moat_core::Error),

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("unknown checkpoint dtype tag {0}")]
    UnknownDtype(u8),

    #[error("shape mismatch for `{name}`: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint lacks tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint tensor `{0}` has no counterpart in the model")]
    UnexpectedTensor(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] moat_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bad(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::BadValue {
            key: key.into(),
            message: message.into(),
        }
    }
}
