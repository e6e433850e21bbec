use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] voxelflow_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable name.
    pub fn kind(&self) -> &'static str {
        use voxelflow_core::Error as C;
        match self {
            Error::Io { .. } => "IoError",
            Error::Format { .. } => "FormatError",
            Error::Json { .. } => "JsonError",
            Error::Config(_) => "ConfigError",
            Error::Core(e) => match e {
                C::Format(_) => "FormatError",
                C::Config(_) => "ConfigError",
                C::DivergedLoss { .. } => "DivergedLoss",
                C::NoGroundTruth => "NoGroundTruth",
                C::Generation(_) => "GenerationError",
                _ => "CoreError",
            },
        }
    }
}
