use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("corrupt selector: {0}")]
    CorruptSelector(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("cannot evaluate on an empty dataset")]
    EmptyEvaluation,

    #[error("bad magic number: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
