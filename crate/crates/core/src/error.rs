use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside [{min}, {max}]")]
    Range {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("dimension mismatch in {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("normalization statistics are degenerate (min = max = {0})")]
    Normalization(f64),

    #[error("cannot form pairs for timbre class {class}: {reason}")]
    Pairing { class: String, reason: String },

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("fusion error: {0}")]
    Fusion(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("corpus format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(
        layer: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            layer: layer.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
