//! Command-line front end.
//!
//! Exit codes: 0 when the report status is `pass` or `outside-theorem`,
//! 1 on certificate failure, 2 on usage or config/DSL parse errors,
//! 3 on numerical failure (errors are also rendered into `report.json`
//! whenever the output directory is known).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

mod config;
mod report;
mod tasks;

use config::{RunConfig, TaskKind};
use report::{write_report, Report};
use tasks::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

#[derive(Parser, Debug)]
#[command(name = "conjugacy", version, about = "Construct and certify topological equivalences of contractive nonautonomous systems")]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the task kind from the config.
    #[arg(long)]
    task: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override both verification tolerances (tol_conj and tol_inv).
    #[arg(long)]
    tol: Option<f64>,
    /// Build the coupled system even when K*gamma >= alpha; all resulting
    /// certificates are marked outside-theorem.
    #[arg(long)]
    unsafe_skip_smallness: bool,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("io error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(task) = &cli.task {
        cfg.task.kind = task.clone();
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.task.seed = Some(seed);
    }
    cfg.validate()?;

    let kind = TaskKind::parse(&cfg.task.kind)?;
    let bundle = tasks::build_system(&cfg)?;
    let settings = Settings::resolve(&cfg, bundle.horizon, cli.unsafe_skip_smallness, cli.tol);
    drop(bundle);

    let formats = cfg
        .output
        .formats
        .clone()
        .unwrap_or_else(|| vec!["json".to_string(), "csv".to_string()]);
    let out_dir = PathBuf::from(&cfg.output.dir);

    let mut report = Report::new(cfg.clone());
    let outcome = tasks::execute(kind, &cfg, &settings, &mut report);

    match outcome {
        Ok(()) => {
            write_report(&report, &out_dir, &formats, started.elapsed().as_millis())?;
            Ok(report.exit_code())
        }
        Err(CliError::Numerical(msg)) => {
            // Render the failure into the report when we can still write it.
            report.error = Some(msg.clone());
            report.resolve_status(false);
            let _ = write_report(&report, &out_dir, &formats, started.elapsed().as_millis());
            Err(CliError::Numerical(msg))
        }
        Err(e) => Err(e),
    }
}
