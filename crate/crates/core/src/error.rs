use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite dB value")]
    NonFiniteDb,
    #[error("grid too small for stencil")]
    GridTooSmall,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("empty constraint set")]
    EmptyConstraintSet,
    #[error("singular distance")]
    SingularDistance,
    #[error("rank-deficient fit")]
    RankDeficientFit,
    #[error("non-finite objective during fit")]
    NonFiniteObjective,
    #[error("scene too dense")]
    SceneTooDense,
    #[error("rate unsatisfiable")]
    RateUnsatisfiable,
    #[error("undefined NMSE")]
    UndefinedNmse,
    #[error("input too small for {0}x{0} SSIM window")]
    SsimInputTooSmall(usize),
    #[error("hash mismatch: {0}")]
    HashMismatch(PathBuf),
    #[error("missing record {name}: {path}")]
    MissingRecord { name: String, path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
