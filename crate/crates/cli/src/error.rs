use std::path::{Path, PathBuf};

use thiserror::Error;

/// Command failure, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] fusion_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 data or format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use fusion_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Argument(_) => 1,
                E::NonFinite { .. } => 3,
                E::Dimension { .. } | E::Data(_) | E::Format { .. } | E::Io { .. } => 2,
            },
        }
    }
}
