use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the admissible domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed field or parameter file; `field` names the offending header entry.
    #[error("format error in `{field}`: {message}")]
    Format { field: &'static str, message: String },

    #[error("truncated payload: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("explicit solver became non-finite at frame {frame}, substep {substep}")]
    Instability { frame: usize, substep: usize },

    #[error("non-finite gradient at iteration {iteration} in parameter block `{block}`")]
    NonFiniteGradient { iteration: u64, block: String },

    #[error("non-finite loss at iteration {iteration} (last good checkpoint: {last_good:?})")]
    NonFiniteLoss {
        iteration: usize,
        last_good: Option<PathBuf>,
    },

    #[error("stale forward tape: {0}")]
    StaleTape(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    SceneGeneration { attempts: usize, reason: String },

    #[error("config error for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid fit window: {0}")]
    FitWindow(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
