use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data: {0}")]
    CorruptData(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("rectangle ({x},{y},{side}) does not fit in a {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        side: usize,
        width: usize,
        height: usize,
    },
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown {registry} entry '{name}'")]
    UnknownName { registry: &'static str, name: String },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },
    #[error("format version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated stream: {0}")]
    Truncated(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
