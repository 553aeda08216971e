/// Errors surfaced by the command-line layer, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments, detected before any work (exit 1).
    #[error("{0}")]
    Config(String),
    /// Failure while running (exit 2).
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<gprf_core::Error> for CliError {
    fn from(e: gprf_core::Error) -> Self {
        match e {
            gprf_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.into()),
        }
    }
}
