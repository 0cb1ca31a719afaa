use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training error (fold {fold}, epoch {epoch}): {message}")]
    Training {
        fold: String,
        epoch: usize,
        message: String,
    },

    #[error("{path}: line {line}: {message}")]
    Ingest {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("selection error: {0}")]
    Selection(String),

    #[error("resampling error: no {class} samples available")]
    Resampling { class: &'static str },

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("experiment error: {0}")]
    Experiment(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
