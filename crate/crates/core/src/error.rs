use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation.
    #[error("{op}: incompatible shapes {shapes:?}")]
    Dimension {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    /// A caller-side precondition was violated.
    #[error("{0}")]
    Contract(String),

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible tail: N1={n1} / gamma={gamma} leaves less than one sample")]
    InfeasibleTail { n1: usize, gamma: f64 },

    #[error("class {class} needs {needed} samples but the source only has {available}")]
    Capacity {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite value encountered during optimization.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure inside one run of a sweep or suite.
    #[error("{context}: {source}")]
    Run {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an invalid configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Json(_) => true,
            Error::Run { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
