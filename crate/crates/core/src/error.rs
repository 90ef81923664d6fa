use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation chain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("insufficient paths: need at least {needed}, got {got}")]
    InsufficientPaths { needed: usize, got: usize },

    #[error("no consensus: best candidate has {inliers} inliers, need {needed}")]
    NoConsensus { inliers: usize, needed: usize },

    #[error("ill-conditioned covariance: Cholesky failed with jitter up to {max_jitter:e}")]
    IllConditioned { max_jitter: f64 },

    #[error("predictive variance {value:e} is below the clamp threshold")]
    NegativeVariance { value: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at row {row} (line {line}): {msg}")]
    Parse { row: u64, line: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::InvalidParameter { .. }
            | Error::Parse { .. }
            | Error::Json { .. }
            | Error::Empty(_)
            | Error::LengthMismatch { .. } => ErrorClass::Config,
            Error::Io { .. } => ErrorClass::Io,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
