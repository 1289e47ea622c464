use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("annotation point {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing counterpart for stem `{stem}`: {detail}")]
    MissingCounterpart { stem: String, detail: String },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
