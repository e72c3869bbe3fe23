use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input file is missing a key or has the wrong layout.
    #[error("format error: {0}")]
    Format(String),

    /// Data violates a structural invariant (row counts, flags, empty result).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A checkpoint does not match the data or configuration it is used with.
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    /// A loss or gradient became NaN or infinite during training.
    #[error("numerical abort: {0}")]
    NonFinite(String),

    #[error("unknown environment `{0}`")]
    UnknownEnv(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("hdf5: {0}")]
    Hdf5(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by numerical divergence rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
