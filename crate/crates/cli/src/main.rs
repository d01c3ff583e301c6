use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icem_cli::{load_config, run, sweep};

#[derive(Parser, Debug)]
#[command(author, version, about = "Signorini contact experiments with fine and multiscale solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override a config entry, e.g. `--override medium.kappa_R=1e4` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Only report warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a single configuration.
    Run { config: PathBuf },
    /// Run every point of the config's `sweep` grid, one output directory each.
    Sweep { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let path = match &cli.command {
        Command::Run { config } | Command::Sweep { config } => config,
    };
    let config = match load_config(path, &cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    match cli.command {
        Command::Run { .. } => match run(&config) {
            Ok(outcome) => {
                log::info!("wrote {}", config.outputs.dir.display());
                if let Some(cem) = &outcome.summary.cem {
                    log::info!("multiscale: {} iterations, E_a {:?}", cem.iterations, cem.e_a);
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Sweep { .. } => match sweep(&config) {
            Ok(points) => {
                let failed: Vec<_> = points.iter().filter(|p| p.result.is_err()).collect();
                for p in &failed {
                    if let Err(e) = &p.result {
                        eprintln!("error: {}: {e}", p.dir.display());
                    }
                }
                if failed.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
