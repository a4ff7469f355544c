use std::path::PathBuf;

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, unreadable inputs or an invalid config.
    #[error("{0}")]
    Usage(String),

    /// A check ran and did not pass.
    #[error("{0}")]
    Check(String),

    /// The registration or phantom generation failed at run time.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.into().display()))
    }
}

impl From<mplreg::Error> for CliError {
    fn from(e: mplreg::Error) -> Self {
        match e {
            mplreg::Error::Diverged { .. } | mplreg::Error::Generation(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
