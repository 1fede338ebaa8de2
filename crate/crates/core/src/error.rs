use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("architecture has no layers")]
    NoLayers,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    #[error("layer {0}: shapes have not been inferred")]
    ShapesNotInferred(usize),

    #[error("invalid prune mask: {0}")]
    InvalidMask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pruning: {0}")]
    Pruning(String),

    #[error("energy: {0}")]
    Energy(String),

    #[error("tensor shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: row {row}: {message}")]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Hybrid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::NoLayers
                | Error::InvalidArch(_)
                | Error::InvalidMask(_)
                | Error::Config(_)
                | Error::Toml(_)
        )
    }
}
