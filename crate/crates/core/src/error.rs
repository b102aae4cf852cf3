use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate column `{0}` in header")]
    DuplicateColumn(String),
    #[error("row {row}: cannot map label value `{value}` to a class")]
    InvalidLabel { row: usize, value: String },
    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    InvalidNumber {
        row: usize,
        column: String,
        value: String,
    },
    #[error("column `{0}` has no observed values")]
    AllMissing(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {class} has {available} groups, fewer than k = {k}")]
    TooFewGroups {
        class: u8,
        available: usize,
        k: usize,
    },
    #[error("{0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Shape(_) | Error::NonFinite(_) | Error::NotConverged { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}
