use std::io;
use std::path::{Path, PathBuf};

/// Everything a command can fail with, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] mib_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{} check(s) failed:\n  {}", .0.len(), .0.join("\n  "))]
    Failed(Vec<String>),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 failed checks, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Failed(_) => 2,
            Self::Io { .. } | Self::Format { .. } => 3,
            Self::Core(e) => match e {
                mib_core::Error::Checkpoint(_) | mib_core::Error::Storage(_) => 3,
                _ => 1,
            },
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
