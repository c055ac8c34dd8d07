use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("instance `{instance}`: {message}")]
    Invariant { instance: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),

    #[error("did not converge after {iterations} iterations (residual {residual})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("cache file: {0}")]
    Cache(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invariant(instance: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invariant { instance: instance.into(), message: message.into() }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema { field: field.into(), message: message.into() }
    }

    /// Numerical failures (as opposed to bad input) map to a distinct CLI exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_)
                | Error::DegenerateMotion(_)
                | Error::InsufficientObservations(_)
                | Error::NotConverged { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
