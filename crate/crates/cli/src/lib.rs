//! Experiment runner on top of `appsag-core`.

pub mod commands;
pub mod config;

pub use commands::{cmd_constants, cmd_run, cmd_verify, CheckResult, RunOutcome, VerifyReport};
pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in {field}: {msg}")]
    Config { field: String, msg: String },

    #[error(transparent)]
    Core(#[from] appsag_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0} verification check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}
