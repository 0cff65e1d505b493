use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("pattern has no active subcarriers")]
    NoActiveSubcarriers,

    #[error("delay {delay_s} s is not a multiple of the sampling interval {t_s} s")]
    UnrepresentableDelay { delay_s: f64, t_s: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {what} at step {step}")]
    Divergence { what: &'static str, step: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("no informative latent variables")]
    NoInformativeLatents,

    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),

    #[error("subcarrier {0} has no mapped latent variable")]
    UnmappedSubcarrier(usize),

    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs or files rather than by a
    /// computation going wrong.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::ShapeMismatch { .. }
                | Error::UnrepresentableDelay { .. }
                | Error::SchemaVersion { .. }
                | Error::Malformed { .. }
                | Error::Json(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
