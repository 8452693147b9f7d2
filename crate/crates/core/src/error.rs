use thiserror::Error;

/// Errors raised anywhere in the optimization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank deficient: requested {requested} components but data has rank {rank}")]
    RankDeficient { requested: usize, rank: usize },

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unknown candidate `{0}`")]
    UnknownCandidate(String),

    #[error("trial timed out after {:.1} s", .0.duration)]
    Timeout(Box<crate::simulator::SimResult>),

    #[error("incompatible model file: {0}")]
    Version(String),
}

pub type Result<T> = std::result::Result<T, Error>;
