use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("could not place object {object} after {attempts} attempts; image too small for the requested object count")]
    Placement { object: usize, attempts: usize },

    #[error("RLE counts sum to {got} but mask size is {expected}")]
    RleSize { expected: usize, got: usize },

    #[error("oracle backend requires annotations")]
    MissingAnnotations,

    #[error("plan has no masked objects")]
    NoMaskedObjects,

    #[error("plan has no masked patches")]
    EmptyMaskedSet,

    #[error("object {0} has zero pixels")]
    ZeroSizeObject(usize),

    #[error("non-finite value in `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stale cache entry for {path}: recorded hash {recorded}, image hash {actual}")]
    StaleCache {
        path: PathBuf,
        recorded: String,
        actual: String,
    },

    #[error("evaluation scene {0} does not contain the context pair")]
    MissingPair(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
