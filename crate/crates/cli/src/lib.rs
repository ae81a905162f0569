//! Command-line orchestration for siamts: corpus generation, scenario runs
//! over label fractions, analysis sweeps and the gradient check.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_gradcheck, cmd_run, cmd_sweep, cmd_synth};
pub use config::{Overrides, RunConfig};
pub use report::KappaReport;

use siamts::ErrorKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<siamts::Error> for CliError {
    fn from(e: siamts::Error) -> Self {
        match e.kind() {
            ErrorKind::Config => CliError::Config(e.to_string()),
            ErrorKind::Data => CliError::Data(e.to_string()),
            ErrorKind::Numeric => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Sizes the global thread pool from `SIAMTS_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SIAMTS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SIAMTS_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}
