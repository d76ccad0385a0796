use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("size error: {0}")]
    Size(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("bank for class {class} is not warm ({len}/{capacity} prototypes)")]
    ColdBank {
        class: usize,
        len: usize,
        capacity: usize,
    },

    #[error("{origin}:{line}:{column}: {message}")]
    Format {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("join error: {0}")]
    Join(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::UnknownClass(_) => "lookup",
            Error::Size(_) => "size",
            Error::Range(_) => "range",
            Error::ColdBank { .. } => "warmup",
            Error::Format { .. } => "format",
            Error::Join(_) => "join",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn format(origin: &str, line: usize, column: usize, message: impl Into<String>) -> Self {
        Error::Format {
            origin: origin.to_string(),
            line,
            column,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
