use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mbo_cli::{cmd_check, cmd_energy, cmd_run, cmd_sweep, configure_threads, load_config, CliError, Verdict};

#[derive(Parser)]
#[command(
    name = "mbo",
    version,
    about = "Thresholding schemes for curvature-driven interface motion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment, write dumps and ledger.csv, audit the ledger.
    Run { config: PathBuf },
    /// Convergence or multiplier-scaling sweep.
    Sweep { config: PathBuf },
    /// Re-audit the energy ledger of stored consecutive dumps.
    Check {
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
        /// Experiment file supplying the scheme, force and tensions.
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the approximate energy of a dump.
    Energy {
        dump: PathBuf,
        /// Kernel time scale; defaults to the one in the dump header.
        #[arg(long)]
        h: Option<f64>,
        /// Experiment file supplying grain tensions.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<Verdict, CliError> {
    configure_threads(std::env::var("MBO_THREADS").ok().as_deref())?;
    match cli.command {
        Command::Run { config } => cmd_run(&load_config(&config)?),
        Command::Sweep { config } => cmd_sweep(&load_config(&config)?),
        Command::Check { dumps, config } => cmd_check(&dumps, &load_config(&config)?),
        Command::Energy { dump, h, config } => {
            let cfg = config.as_deref().map(load_config).transpose()?;
            cmd_energy(&dump, h, cfg.as_ref()).map(|_| Verdict::Pass)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(3);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli) {
        Ok(v) => ExitCode::from(v.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
