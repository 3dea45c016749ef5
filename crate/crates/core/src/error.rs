use thiserror::Error;

/// Errors produced by dataset ingestion, design construction, and model fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no complete records")]
    NoCompleteRecords,

    #[error("no observed responses")]
    NoObservedResponses,

    #[error("rank-deficient fixed effects{}", fmt_dependent(columns))]
    RankDeficient { columns: Vec<String> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infeasible method: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn fmt_dependent(columns: &[String]) -> String {
    if columns.is_empty() {
        String::new()
    } else {
        format!("; dependent columns: {}", columns.join(", "))
    }
}
