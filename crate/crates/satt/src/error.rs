use std::path::Path;

/// CLI failure, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    /// 1 for usage and configuration errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Runtime(anyhow::anyhow!("{}: {err}", path.display()))
    }
}

impl From<satt_core::Error> for CliError {
    fn from(e: satt_core::Error) -> Self {
        match e {
            satt_core::Error::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}
