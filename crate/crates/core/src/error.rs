use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("graph/feature mismatch: {0}")]
    GraphMismatch(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint has bad magic {found:?}, expected \"VGUN\"")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated: {0}")]
    Truncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint is malformed: {0}")]
    Malformed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
