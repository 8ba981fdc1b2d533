use std::path::PathBuf;

/// Errors raised anywhere in the network, data pipeline or harness.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("bayar projection failed for slice (out={out}, in={input}): non-center weights sum to (nearly) zero")]
    Projection { out: usize, input: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint config mismatch on keys: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("data error ({path}): {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Data { path: path.into(), reason: reason.to_string() }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Checkpoint { path: path.into(), reason: reason.to_string() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::Usage(_) => 2,
            Error::Data { .. } | Error::Io(_) | Error::Checkpoint { .. } => 3,
            Error::Numerical(_) | Error::Projection { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
