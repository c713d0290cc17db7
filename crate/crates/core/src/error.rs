use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE are supported)")]
    UnsupportedModel(String),

    #[error("shape mismatch for {what}: expected {expected_w}x{expected_h}, got {actual_w}x{actual_h}")]
    Shape {
        what: String,
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("image error for {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("clustering produced no groups (eps={eps}, min_pts={min_pts}); increase eps or lower min_pts")]
    NoClusters { eps: f64, min_pts: usize },

    #[error("non-finite loss component `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("{side} point cloud is empty")]
    EmptyCloud { side: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
