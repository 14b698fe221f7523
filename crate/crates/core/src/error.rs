use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("model already fused")]
    AlreadyFused,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("heterogeneous models: {0}")]
    Heterogeneous(String),

    #[error("bad magic: expected \"SPRN\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("version mismatch: file has version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
