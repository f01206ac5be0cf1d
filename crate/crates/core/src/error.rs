use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("expected a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("non-finite value produced by {op} during {stage}")]
    NonFinite {
        op: &'static str,
        stage: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch of {rows} rows has no negatives; at least 2 rows are required")]
    BatchTooSmall { rows: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("k = {k} exceeds the {available} available training features")]
    TooFewNeighbours { k: usize, available: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("accuracy matrix is incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("backward transfer is undefined for a single task")]
    UndefinedBwt,

    #[error("task stream: {0}")]
    Stream(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite {term} loss at task {task}, epoch {epoch}")]
    NonFiniteLoss {
        term: &'static str,
        task: usize,
        epoch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
