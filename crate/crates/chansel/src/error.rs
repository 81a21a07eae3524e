use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is missing, unknown or invalid.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },
    /// A dataset file does not follow the binary record layout.
    #[error("{}: byte {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: u64, message: String },
    /// A checkpoint cannot be used with this build or this config.
    #[error("artifact mismatch: {0}")]
    Artifact(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] chansel_core::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 2 for configuration problems, 3 for unusable
    /// artifacts, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config { .. } | Error::Core(chansel_core::Error::Config(_)) => 2,
            Error::Artifact(_) | Error::Core(chansel_core::Error::Mismatch(_)) => 3,
            _ => 1,
        }
    }
}
