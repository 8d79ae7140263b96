use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config files, missing inputs or incompatible artifacts.
    #[error("config error: {0}")]
    Config(String),

    /// Divergence or any other non-finite value during a run.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A file exists but does not follow its format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A frozen tensor changed during training.
    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Format { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Integrity(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<stunet_core::Error> for CliError {
    fn from(e: stunet_core::Error) -> Self {
        match e {
            stunet_core::Error::NonFinite(msg) => CliError::Numeric(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}
