use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    Numerics(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("feature {0} has a zero decoder column")]
    DegenerateFeature(usize),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("feature {0} never fires on this dataset")]
    EmptyFeature(usize),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("could not parse describer output: {0}")]
    Parse(String),

    #[error("describer failed after {attempts} attempts: {last}")]
    Describer { attempts: usize, last: String },

    #[error("generator failed: {0}")]
    Generator(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("training aborted at step {step}")]
    TrainAborted {
        step: usize,
        #[source]
        source: Box<SaeError>,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SaeError {
    pub(crate) fn dim(what: &'static str, expected: usize, actual: usize) -> Self {
        SaeError::Dimension {
            what,
            expected,
            actual,
        }
    }

    /// True for errors caused by NaN/Inf arithmetic, including aborted training runs.
    pub fn is_numerics(&self) -> bool {
        match self {
            SaeError::Numerics(_) => true,
            SaeError::TrainAborted { source, .. } => source.is_numerics(),
            _ => false,
        }
    }
}
