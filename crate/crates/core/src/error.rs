use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{malformed} of {total} rows malformed (tolerance {tolerance}); first: {first}")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        tolerance: f64,
        first: String,
    },

    #[error("duplicate (user, item, timestamp) triples: {}", .0.join("; "))]
    DuplicateEvents(Vec<String>),

    #[error("filter eliminated all data (min_interactions = {0})")]
    EmptyFixedPoint(usize),

    #[error("{what}: requested {requested}, available {available}")]
    SizeExceeded {
        what: String,
        requested: usize,
        available: usize,
    },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}, max |w| = {max_weight}")]
    NonFiniteLoss {
        epoch: usize,
        loss: f64,
        max_weight: f64,
    },

    #[error("backend failure after {attempts} attempt(s): {message}")]
    Backend { attempts: usize, message: String },

    #[error("stale input {path}: digest {actual} does not match manifest {expected}")]
    StaleInput {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or arguments rather than by the
    /// environment or a backend at run time.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Backend { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
