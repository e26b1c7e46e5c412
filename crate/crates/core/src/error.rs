use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside the domain where an operation is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// A time (or index) argument falls outside its admissible interval.
    #[error("range error: {0}")]
    Range(String),

    /// Fixed-step ODE integration diverged.
    #[error("integration failure: {0}")]
    Integration(String),

    /// An object could not be built from the given dimensions.
    #[error("construction error: {0}")]
    Construction(String),

    /// A non-finite value showed up during a numerical computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A covariance matrix was not positive semidefinite within jitter.
    #[error("covariance error: {0}")]
    Covariance(String),

    /// Invalid experiment configuration. `path` names the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
