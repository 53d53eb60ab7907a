use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic {found:?}, expected \"HCT1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),

    #[error("unsupported tensor rank {0} (expected 3 or 4)")]
    BadRank(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension overflow: {0:?}")]
    DimensionOverflow(Vec<u32>),

    #[error("{0} trailing bytes after tensor record")]
    TrailingData(usize),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported algorithm: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("missing weight tensor {0:?}")]
    MissingWeight(String),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures of the underlying file system rather than of the input's content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
