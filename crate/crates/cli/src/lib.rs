//! Config-driven runner for the `mbo-core` schemes: experiment files,
//! convergence sweeps, ledger audits of stored trajectories and bit-exact
//! field dumps.
//!
//! Exit codes: 0 pass, 2 failed audit or sweep target, 3 configuration
//! error, 4 run-time or I/O failure (including corrupt dumps).

pub mod commands;
pub mod config;
pub mod dump;
pub mod error;
pub mod setup;

pub use commands::{cmd_check, cmd_energy, cmd_run, cmd_sweep, Verdict};
pub use config::{parse_config, ExperimentConfig};
pub use dump::Dump;
pub use error::CliError;

use std::path::Path;

/// Reads and parses an experiment file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Applies `MBO_THREADS` to the global thread pool.
pub fn configure_threads(value: Option<&str>) -> Result<(), CliError> {
    let Some(v) = value else {
        return Ok(());
    };
    let threads: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::config(format!("MBO_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(format!("MBO_THREADS: {e}")))
}
