use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("singular time t = {0}: field is undefined at t = 1")]
    SingularTime(f64),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("integrator exceeded {max_steps} steps (reached t = {t_reached})")]
    NonConvergence {
        max_steps: usize,
        t_reached: f64,
        /// State at `t_reached`.
        partial: Vec<f64>,
    },

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("particle filter degenerated at step {step}: all weights vanished")]
    DegenerateFilter { step: usize },

    #[error("malformed data in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that come from the numerics rather than the caller or the filesystem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::NonConvergence { .. }
                | Error::DegenerateFilter { .. }
                | Error::SingularTime(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::NotFound(_) | Error::Format { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        });
    }
    Ok(())
}
