use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("slide not found: {0}")]
    SlideNotFound(PathBuf),

    #[error("missing magnification metadata for {0} (no sidecar and no header value)")]
    MissingMagnification(PathBuf),

    #[error("window ({x},{y},{w},{h}) outside slide of size {width}x{height}")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: i64,
        h: i64,
        width: u32,
        height: u32,
    },

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("invalid polygon: {0}")]
    Polygon(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: usize, step: usize },

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    #[error("upstream artifact changed: {0}")]
    HashMismatch(String),

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
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
