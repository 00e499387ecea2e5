use std::path::PathBuf;

use crate::config::ConfigError;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Numeric = 2,
    Io = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] cfm_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("experiment directory {0} is locked by another process")]
    Locked(PathBuf),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Config(ConfigError::Read { .. }) => ExitStatus::Io,
            CliError::Config(_) | CliError::Usage(_) => ExitStatus::Usage,
            CliError::Core(e) if e.is_numeric() => ExitStatus::Numeric,
            CliError::Core(e) if e.is_io() => ExitStatus::Io,
            CliError::Core(_) => ExitStatus::Usage,
            CliError::Io { .. } | CliError::Locked(_) => ExitStatus::Io,
        }
    }
}
