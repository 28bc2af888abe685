use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },

    #[error("cannot shrink field resolution from {from:?} to {to:?}")]
    Shrink { from: [usize; 3], to: [usize; 3] },

    #[error("gradient tape is stale: recorded for a different field state")]
    StaleTape,

    #[error("sampler starved after {attempts} attempts at threshold {threshold}")]
    SamplerStarvation { attempts: usize, threshold: f64 },

    #[error("sampler starved in round {round}, iteration {iteration}: {source}")]
    TrainingStarvation {
        round: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("object {0} has an empty mask in every frame")]
    EmptyObject(usize),

    #[error("frame {frame} has no poses (scene has {frames} frames)")]
    MissingFrame { frame: usize, frames: usize },

    #[error("scene generation failed after {0} retries")]
    RetryBudget(usize),

    #[error("{0}")]
    InvalidInput(String),

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input rather than a bug or environment failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Image(_) | Error::StaleTape)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
