use std::path::PathBuf;

/// Crate-wide error type.
///
/// `NonFinite` is kept separate from the other variants because the CLI maps
/// it to a distinct exit code (2): a NaN/Inf anywhere in a forward or backward
/// pass aborts the current step instead of propagating garbage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error: 2 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
