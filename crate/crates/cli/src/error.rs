use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] smoe_core::Error),
    #[error("gradient check failed: max relative error {0:e} exceeds {1:e}")]
    GradCheck(f64, f64),
}

impl CliError {
    /// 1 = usage or configuration, 2 = data or format, 3 = numeric fault.
    pub fn exit_code(&self) -> i32 {
        use smoe_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(E::InvalidConfig(_)) => 1,
            CliError::Core(E::NumericFault { .. }) | CliError::GradCheck(..) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
