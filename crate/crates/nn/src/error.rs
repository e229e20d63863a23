use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fft size: {height}x{width} is not a power of two")]
    FftSize { height: usize, width: usize },
    #[error("empty tape")]
    EmptyTape,
    #[error("loss node is not a scalar: {0:?}")]
    NotScalar([usize; 4]),
    #[error("unknown parameter block {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter block {0:?}")]
    DuplicateParam(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] phyrm_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
