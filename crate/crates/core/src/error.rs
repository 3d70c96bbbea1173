use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cell index {index} out of range for a stretch of {len} cells")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("plant fault at step {step}: {detail}")]
    PlantFault { step: usize, detail: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("experiment store: {0}")]
    Store(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
