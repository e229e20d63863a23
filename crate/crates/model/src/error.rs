use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] phyrm_nn::Error),
    #[error(transparent)]
    Core(#[from] phyrm_core::Error),
    #[error("depth/size mismatch: {0}")]
    DepthMismatch(String),
    #[error("level-count mismatch: expected {expected} anchor levels, got {got}")]
    LevelMismatch { expected: usize, got: usize },
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
