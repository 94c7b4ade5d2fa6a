use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ray does not intersect the scene envelope")]
    NoIntersection,
    #[error("point lies behind the camera")]
    BehindCamera,
    #[error("pixel ({0}, {1}) outside image bounds")]
    PixelOutOfBounds(f64, f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("guided samples requested but no depth center is available")]
    NoGuideCenter,
    #[error("config: unknown key `{0}`")]
    UnknownConfigKey(String),
    #[error("config: bad value for `{key}`: {msg}")]
    BadConfigValue { key: String, msg: String },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
