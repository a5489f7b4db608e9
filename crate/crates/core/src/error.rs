use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Schema violations collected while validating an experiment config.
    #[error("invalid config: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for {what} (valid: {valid})")]
    Index {
        what: String,
        index: usize,
        valid: String,
    },

    #[error("numeric failure in {what}{}", .layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Numeric { what: String, layer: Option<usize> },

    #[error("{framework} does not support {operation}")]
    Unsupported {
        framework: String,
        operation: String,
    },

    #[error("parameter tree mismatch: {0}")]
    Structure(String),

    #[error("unsupported or corrupt file: {message} (format version {}, supported {expected})", .found.map(|v| v.to_string()).unwrap_or_else(|| "unknown".into()))]
    Format {
        found: Option<u32>,
        expected: u32,
        message: String,
    },

    #[error("data error for sample {sample:?}: {message}")]
    Data {
        sample: Option<usize>,
        message: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(what: impl Into<String>) -> Self {
        Error::Numeric {
            what: what.into(),
            layer: None,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Schema(_)
            | Error::Shape { .. }
            | Error::Index { .. }
            | Error::Unsupported { .. }
            | Error::Structure(_)
            | Error::Format { .. }
            | Error::Input(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Io { .. } | Error::Data { .. } => 4,
        }
    }
}
