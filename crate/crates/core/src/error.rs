use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("client error after {attempts} attempt(s): {reason}")]
    Client { attempts: usize, reason: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("caption error: {0}")]
    Caption(String),

    #[error("training error at epoch {epoch}, step {step}: {reason}")]
    Training {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("unknown {kind} `{key}`")]
    Lookup { kind: &'static str, key: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingInput(path);
        }
        Error::Io { path, source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
