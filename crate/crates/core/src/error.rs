use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::format::FormatError;
use crate::trainer::LogRecord;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{op}: dimension mismatch ({detail})")]
    Dimension { op: &'static str, detail: String },
    #[error("{0}: batch is empty")]
    EmptyBatch(&'static str),
    #[error("self-masked contextualization needs at least 2 rows, got {0}")]
    SelfMaskTooSmall(usize),
    #[error("class {0} has no support rows")]
    EmptyClass(usize),
    #[error("class {class} has {available} support rows, {needed} required")]
    InsufficientSupport {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("support set is empty")]
    EmptySupport,
    #[error("cross-validation grid is empty")]
    EmptyGrid,
    #[error("linear fit is singular: {0}")]
    SingularFit(String),
    #[error("result grids do not match: {0}")]
    GridMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last: Option<Box<LogRecord>>,
    },
    #[error("non-finite gradient norm at step {step}")]
    NonFiniteGradient {
        step: usize,
        last: Option<Box<LogRecord>>,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
