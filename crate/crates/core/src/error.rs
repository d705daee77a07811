use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep ordering violated: {0}")]
    Ordering(String),

    #[error("injection error at layer {layer}, step {step}: {msg}")]
    Injection { layer: usize, step: usize, msg: String },

    #[error("{0} is not available in this build")]
    Capability(String),

    #[error("missing feature bank entry for step {step}")]
    MissingStep { step: usize },

    #[error("{stage} failed at step {step}: {source}")]
    Stage {
        stage: &'static str,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Wraps an error with the pipeline stage and sample step it occurred in.
    pub fn at_stage(self, stage: &'static str, step: usize) -> Self {
        Error::Stage { stage, step, source: Box::new(self) }
    }

    /// True for errors caused by bad input (as opposed to IO or backend failures).
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Ordering(_) => true,
            Error::Stage { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}
