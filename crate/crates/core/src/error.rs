use std::path::PathBuf;

use crate::body::MotionSequence;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("joint {joint} is behind the camera (depth {depth:.6}){}", frame_suffix(*.frame, *.dancer))]
    BehindCamera {
        dancer: Option<usize>,
        frame: Option<usize>,
        joint: usize,
        depth: f64,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("optimization failed at iteration {iteration}: {reason}")]
    OptimizationFailed {
        iteration: usize,
        reason: String,
        /// Last iterate whose energy was finite.
        last_valid: Box<Vec<MotionSequence>>,
    },

    #[error("training failed at epoch {epoch}: {reason}")]
    TrainingFailed { epoch: usize, reason: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("corrupted container at byte offset {offset}: {message}")]
    Corruption { offset: u64, message: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

fn frame_suffix(frame: Option<usize>, dancer: Option<usize>) -> String {
    match (dancer, frame) {
        (Some(d), Some(f)) => format!(" at dancer {d}, frame {f}"),
        (None, Some(f)) => format!(" at frame {f}"),
        (Some(d), None) => format!(" for dancer {d}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Config { .. }
                | Error::Format { .. }
                | Error::Corruption { .. }
                | Error::Json { .. }
        )
    }
}
