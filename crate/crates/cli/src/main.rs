use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use tic_cli::{registry, ConfigError, ExperimentConfig};

/// Exit codes: 0 all checks pass, 1 a check fails, 2 config or runtime error.
#[derive(Parser)]
#[command(name = "tic", version, about = "Time-inconsistent BSDE control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Parent directory for the run directory (overrides `output_dir`).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// List registered experiments.
    List,
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<(ExperimentConfig, &'static registry::Experiment), ConfigError> {
    let cfg = ExperimentConfig::load(path)?;
    let exp = cfg.validate()?;
    Ok((cfg, exp))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::List => {
            for line in registry::listing() {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok((cfg, exp)) => {
                println!("ok: {} ({})", exp.name, cfg.run_name());
                for field in cfg.unused_fields(exp) {
                    println!("note: key '{field}' is not read by this experiment");
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(2)
            }
        },
        Command::Run { config, output_dir } => {
            let cfg = match load(&config) {
                Ok((cfg, _)) => cfg,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let start = Instant::now();
            match tic_cli::run(&cfg, output_dir.as_deref()) {
                Ok(result) => {
                    println!("{} -> {}", result.report.experiment, result.report.anchor);
                    for check in &result.report.checks {
                        println!("  {check}");
                    }
                    println!("artifacts in {} ({:.1} s)", result.dir.display(), start.elapsed().as_secs_f64());
                    if result.report.passed {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
