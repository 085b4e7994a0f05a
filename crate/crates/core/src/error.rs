use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape, range or contract violation on an in-memory value.
    #[error("validation error: {0}")]
    Validation(String),

    /// Invalid configuration (weights, architecture, palette roles, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed palette file; `line` is 1-based.
    #[error("palette format error at line {line}: {msg}")]
    PaletteFormat { line: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss term became NaN or infinite during training.
    #[error("non-finite loss term `{term}` at step {step}: {value}")]
    NonFinite {
        term: &'static str,
        step: u64,
        value: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
