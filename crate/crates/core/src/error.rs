use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("location ({lon}, {lat}) lies outside the {what}")]
    OutOfBounds { lon: f64, lat: f64, what: &'static str },

    #[error("matrix not positive definite: pivot {index} = {pivot:e}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("fit failed: {message}")]
    Fit {
        message: String,
        /// Last parameter vector that produced a finite objective, if any.
        last_valid: Option<Vec<f64>>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn fit(msg: impl Into<String>) -> Self {
        Error::Fit {
            message: msg.into(),
            last_valid: None,
        }
    }
}
