use std::path::PathBuf;

use thiserror::Error;

use crate::iterative::IterationRecord;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("basis order too large: {0}")]
    BasisOrderTooLarge(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("j_max too small: truncated thermal tail {tail:.3e} exceeds {limit:.3e}")]
    JMaxTooSmall { tail: f64, limit: f64 },

    #[error("step too coarse: norm drifted by {drift:.3e}")]
    StepTooCoarse { drift: f64 },

    #[error("singular momentum transfer s=0 for electron probe")]
    SingularMomentumTransfer,

    #[error("kernel too large: {rows} x {cols} = {entries} entries exceeds cap {cap}")]
    KernelTooLarge {
        rows: usize,
        cols: usize,
        entries: usize,
        cap: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("unresolvable order: {0}")]
    Unresolvable(String),

    #[error("aliasing: harmonic {harmonic} exceeds Nyquist limit {limit} of {samples} samples")]
    Aliasing { harmonic: i64, limit: i64, samples: usize },

    #[error("ambiguous factorization for harmonic {harmonic}: {pairs} contributing pairs")]
    AmbiguousFactorization { harmonic: i64, pairs: usize },

    #[error("zero-norm reference")]
    ZeroNormReference,

    #[error("iteration diverged at step {iteration}: error {error:.3e} vs minimum {minimum:.3e}")]
    Diverged {
        iteration: usize,
        error: f64,
        minimum: f64,
        history: Vec<IterationRecord>,
    },

    #[error("grid too coarse: spacing {spacing:.4} exceeds bound {bound:.4}")]
    GridTooCoarse { spacing: f64, bound: f64 },

    #[error("validation failed at {path}: {message}")]
    Validation { path: String, message: String },

    #[error("digest mismatch for {file}: expected {expected}, found {found}")]
    DigestMismatch {
        file: String,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
