use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload mismatch: expected {expected} values, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite activation after {layer}")]
    NonFiniteActivation { layer: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {value}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } | Error::Header(_) | Error::PayloadMismatch { .. } => "format",
            Error::Format(_) | Error::Json(_) => "format",
            Error::NonFinite(_) | Error::NonFiniteActivation { .. } | Error::NonFiniteLoss { .. } => {
                "numeric"
            }
            Error::Shape(_) => "shape",
            Error::Invalid(_) => "invalid",
            Error::Capability(_) => "capability",
            Error::Config(_) => "config",
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
