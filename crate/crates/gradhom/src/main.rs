use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gradhom::config::{Command as RunCommand, RunConfig};
use gradhom::runner;

/// Two-scale isogeometric solver for second-gradient hyperelastic
/// homogenization: cell problems, homogenized stresses and tangents, and
/// the nested Cook's membrane.
#[derive(Parser)]
#[command(name = "gradhom", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Worker threads for assembly and cell solves (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for report.csv, convergence.csv and fields_*.vtk.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log filter: off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the configured cell problem and report homogenized
    /// quantities, sweeping first-gradient scalings if several are given.
    Rve { config: PathBuf },
    /// Solve the Cook's membrane with nested cell problems over the
    /// configured refinement schedule.
    TwoScale { config: PathBuf },
    /// Run the consistency checks on the configured cell and print a
    /// pass/fail matrix; exits nonzero if any check fails.
    Verify { config: PathBuf },
}

impl Cmd {
    fn expected(&self) -> RunCommand {
        match self {
            Cmd::Rve { .. } => RunCommand::Rve,
            Cmd::TwoScale { .. } => RunCommand::TwoScale,
            Cmd::Verify { .. } => RunCommand::Verify,
        }
    }

    fn config_path(&self) -> &PathBuf {
        match self {
            Cmd::Rve { config } | Cmd::TwoScale { config } | Cmd::Verify { config } => config,
        }
    }
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.command.config_path();
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config = RunConfig::from_json(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if config.command != cli.command.expected() {
        anyhow::bail!(
            "config {} declares command `{}` but the `{}` subcommand was invoked",
            path.display(),
            config.command,
            cli.command.expected()
        );
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let level = match cli.log_level.parse::<log::LevelFilter>() {
        Ok(level) => level,
        Err(_) => {
            eprintln!("error: unknown log level `{}`", cli.log_level);
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    env_logger::Builder::new().filter_level(level).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }

    let config = match load_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };

    match runner::run(&config, &cli.out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed; see {}", cli.out.join("report.csv").display());
            ExitCode::from(EXIT_SOLVER)
        }
        Err(e) if e.is_validation() => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}
