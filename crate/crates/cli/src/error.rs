use thiserror::Error;

/// Exit status for a run that completed with every check passing.
pub const EXIT_OK: i32 = 0;
/// Exit status when any acceptance check fails.
pub const EXIT_CRITERION: i32 = 1;
/// Exit status for malformed invocations or spec files.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] localist_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact: {0}")]
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_CRITERION,
        }
    }
}
