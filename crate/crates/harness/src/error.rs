use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] relit_core::Error),
    #[error("acceptance thresholds failed: {0}")]
    Threshold(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HarnessError::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code: 2 config, 3 I/O, 4 threshold, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Io { .. } | HarnessError::Format { .. } => 3,
            HarnessError::Threshold(_) => 4,
            HarnessError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &relit_core::Error) -> i32 {
    use relit_core::Error as E;
    match e {
        E::Config(_) => 2,
        E::Io { .. } | E::Format { .. } | E::Codec(_) => 3,
        E::Stage { source, .. } => core_exit_code(source),
        _ => 1,
    }
}
