use thiserror::Error;

/// Errors raised anywhere in the modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("duplicate cell: {0}")]
    Conflict(String),
    #[error("filter on {0} produced an empty dataset")]
    EmptySubset(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate coregionalization: population {0} has zero process variance")]
    Degenerate(String),
    #[error("conditioning failure: {0}")]
    Conditioning(String),
    #[error("trend basis is rank deficient on the training design")]
    SingularTrend,
    #[error("unknown population: {0}")]
    UnknownPopulation(String),
    #[error("non-finite likelihood at coordinate {0}")]
    NonFinite(usize),
    #[error("all {} optimizer starts failed: {}", .0.len(), .0.join("; "))]
    Optimization(Vec<String>),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("division by zero: {0}")]
    Division(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, each mapped to a process exit code by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Optimization,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Optimization => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Optimization => "optimization",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            Parameter(_) | Config(_) | Artifact(_) | Json(_) => ErrorCategory::Config,
            Schema(_) | Row { .. } | Conflict(_) | EmptySubset(_) | UnknownPopulation(_)
            | Grouping(_) | Window(_) | Io(_) | Csv(_) => ErrorCategory::Data,
            Degenerate(_) | Conditioning(_) | SingularTrend | NonFinite(_) | Division(_) => {
                ErrorCategory::Numeric
            }
            Optimization(_) => ErrorCategory::Optimization,
        }
    }
}
