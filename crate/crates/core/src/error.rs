//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, network construction, IO and training.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received inputs with incompatible shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// The key=value config file could not be parsed.
    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    /// A binary or text file format violated its specification.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    /// A precondition on operation inputs was violated.
    #[error("{0}")]
    Invalid(String),

    #[error("training aborted: {0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
