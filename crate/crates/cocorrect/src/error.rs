use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration, rejected before any compute starts.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file is missing or unreadable.
    #[error("load error: {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    /// Shape or length mismatch between tensors.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Failure during training or evaluation, with stage context attached
    /// by the training loop.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 for config errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
