use std::path::PathBuf;

use thiserror::Error;

use crate::shape_solver::IterationRecord;
use crate::FrameId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape parameters: expected {expected} coefficients, got {actual}")]
    InvalidParams { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("point behind camera (frame {frame:?}, vertex {vertex:?}, depth {depth:e})")]
    BehindCamera {
        frame: Option<FrameId>,
        vertex: Option<usize>,
        depth: f64,
    },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("invalid initialization: {0}")]
    InvalidInitialization(String),

    #[error("ill-posed shape solve (condition estimate {condition:.3e})")]
    IllPosed { condition: f64 },

    #[error("mesh filtering removed every triangle")]
    OverFiltered,

    #[error("unfittable scene: {0}")]
    UnfittableScene(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("fit iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        /// Records of the iterations that completed before the failure.
        trace: Vec<IterationRecord>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage and iteration wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Iteration { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_unfittable(&self) -> bool {
        matches!(self.root(), Error::UnfittableScene(_))
    }

    /// Input that could not be read or failed validation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Io { .. }
                | Error::Format { .. }
                | Error::Validation(_)
                | Error::InvalidModel(_)
                | Error::InvalidCamera(_)
        )
    }
}
