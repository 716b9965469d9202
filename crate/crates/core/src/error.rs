use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,

    #[error("variance undefined for a sample of size {0}")]
    UndefinedVariance(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate variance")]
    DegenerateVariance,

    #[error("delta method undefined: zero component mean")]
    DeltaUndefined,

    #[error("inconsistent moments: delta variance {0} is negative")]
    InconsistentMoments(f64),

    #[error("constant covariate")]
    ConstantCovariate,

    #[error("underdetermined: {n} units for {k} covariates")]
    Underdetermined { n: usize, k: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing required field: {0}")]
    MissingField(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("too few rows: {0}")]
    TooFewRows(String),

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported schema version {found} (supported major {supported})")]
    SchemaVersion { found: String, supported: u32 },

    #[error("{path}: {rejected} of {read} rows rejected (threshold {threshold})")]
    TooManyRejects {
        path: PathBuf,
        read: usize,
        rejected: usize,
        threshold: f64,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for errors caused by the caller's data, files or configuration
    /// rather than by the environment. A missing input file and malformed
    /// JSON count as validation failures; other I/O errors do not.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Json(e) => !e.is_io(),
            _ => true,
        }
    }
}
