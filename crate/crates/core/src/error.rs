use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("empty support: every softmax channel is masked")]
    EmptySupport,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no targets for matching")]
    NoTargets,

    #[error("empty cost matrix")]
    EmptyCostMatrix,

    #[error("brute-force matching limited to min(N, S) <= {limit}, got {got}")]
    OracleTooLarge { limit: usize, got: usize },

    #[error("no old model: pseudo-labeling requires step t >= 2")]
    NoOldModel,

    #[error("missing QCR adapter for incremental class {0}")]
    MissingAdapter(u16),

    #[error("class sets overlap across steps: {0:?}")]
    OverlappingClasses(Vec<u16>),

    #[error("scenario classes missing from dataset: {0:?}")]
    MissingClasses(Vec<u16>),

    #[error("unknown class id {0}")]
    UnknownClass(u16),

    #[error("empty dataset for step {0}")]
    EmptyStepDataset(usize),

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        LabError::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
