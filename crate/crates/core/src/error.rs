use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the scoring pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("validation error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Validation { line: Option<usize>, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub(crate) fn validation(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Validation { line, msg: msg.into() }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Validation { .. } => "validation",
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
        }
    }
}
