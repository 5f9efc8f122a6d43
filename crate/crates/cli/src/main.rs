use std::path::PathBuf;
use std::process::ExitCode;

use appsag_cli::{cmd_constants, cmd_run, cmd_verify, CliError, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "appsag", version, about = "Asynchronous push-pull SAG experiments for MSPBE policy evaluation")]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, then write metrics CSV and a constants report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to outputs.dir of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the structural identities on a short trace.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Print spectral and rate constants.
    Constants {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, out } => {
            let cfg = load(&common)?;
            let dir = out.unwrap_or_else(|| cfg.outputs.dir.clone());
            for o in cmd_run(&cfg, &dir)? {
                println!("n = {}: {} rows -> {}, final err_max {:e}, report {}", o.n, o.rows, o.metrics.display(), o.final_err, o.report.display());
            }
        }
        Command::Verify { common } => {
            let cfg = load(&common)?;
            let mut failed = 0;
            for r in cmd_verify(&cfg)? {
                print!("{}", r.text());
                failed += r.checks.iter().filter(|c| !c.passed).count();
            }
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Constants { common } => {
            let cfg = load(&common)?;
            print!("{}", cmd_constants(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
