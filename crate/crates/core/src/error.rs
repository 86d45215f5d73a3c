use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("spatial size {height}x{width} is not a multiple of {multiple}")]
    SpatialSize {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("backward called before a forward pass")]
    BackwardBeforeForward,

    #[error("label value {0} is outside 0..=3")]
    InvalidLabel(u8),

    #[error("invalid value for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("checkpoint tensor table does not match the model: {0}")]
    CheckpointMismatch(String),

    #[error("malformed image file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }
}
