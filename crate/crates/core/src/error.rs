use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate ray: start and end point coincide")]
    DegenerateRay,
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),
    #[error("geometry mismatch between score volumes")]
    GeometryMismatch,
    #[error("reflection prior undefined: {0}")]
    PriorUndefined(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("covariance is not positive semi-definite")]
    NotPositiveSemiDefinite,
    #[error("time spans do not overlap")]
    DisjointTimeSpans,
    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
