use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is numerically singular (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("covariance matrix is singular; check channels {0} and {1} (constant or duplicated?)")]
    SingularCovariance(usize, usize),

    #[error("unsupported resampling ratio {source_hz} Hz -> {target_hz} Hz (must be an integer decimation)")]
    UnsupportedRatio { source_hz: f64, target_hz: f64 },

    #[error("invalid band {name}: [{low_hz}, {high_hz}] Hz with Nyquist {nyquist_hz} Hz")]
    Band {
        name: String,
        low_hz: f64,
        high_hz: f64,
        nyquist_hz: f64,
    },

    #[error("surrogate generation failed for pair {src}->{dst} after {retries} retries")]
    SurrogateFailure { src: usize, dst: usize, retries: usize },

    #[error("rank-deficient lag matrix for pair {src}->{dst}")]
    Rank { src: usize, dst: usize },

    #[error("invalid lag order {0}")]
    InvalidOrder(usize),

    #[error("unstable VAR system: spectral radius {0} >= 1")]
    Stability(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidOrder(_) | Error::Band { .. } | Error::UnsupportedRatio { .. } => {
                ErrorClass::Usage
            }
            Error::SingularMatrix { .. }
            | Error::SingularCovariance(..)
            | Error::SurrogateFailure { .. }
            | Error::Rank { .. }
            | Error::Stability(_)
            | Error::DegenerateTest(_) => ErrorClass::Numerical,
            Error::InsufficientData(_)
            | Error::Shape(_)
            | Error::Data(_)
            | Error::Stratification(_)
            | Error::Format { .. }
            | Error::CorruptFile { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
