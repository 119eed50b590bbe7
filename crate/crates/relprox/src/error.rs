use std::io;
use std::path::{Path, PathBuf};

/// Failure of a command, classified by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// A check, assertion, or numerical guard failed.
    #[error("{0}")]
    Check(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    /// A file exists but does not have the expected layout.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
        }
    }

    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        CliError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        CliError::Format { path: path.as_ref().to_path_buf(), message: message.into() }
    }
}

impl From<relprox_core::Error> for CliError {
    fn from(e: relprox_core::Error) -> Self {
        match e {
            relprox_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Check(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches a path to IO errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
