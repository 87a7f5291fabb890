use std::io;

use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("index {index} out of range for size {len}")]
    Range { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("search space of {size} sequences exceeds the limit of {limit}")]
    SearchSpace { size: u128, limit: u128 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Format(_)
            | Error::Range { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Degenerate(_) => 3,
            Error::Numeric(_) => 4,
            Error::Dimension { .. } | Error::Backward(_) | Error::SearchSpace { .. } => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
