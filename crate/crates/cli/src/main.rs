use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use cylwave::experiment::{render_catalog, run, write_bundle, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "cylwave",
    version,
    about = "Run wave-asymptotics experiments on cylindrical ends"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every check of a config and write the report bundle.
    Run {
        config: PathBuf,
        /// Output directory. Falls back to the config's `output`, then to
        /// CYLWAVE_OUT, then to `cylwave-out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print the catalog of named checks.
    ListChecks,
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

/// 0: all checks passed; 1: a threshold failed; 2: bad config or I/O.
fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    cfg.validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(cfg)
}

fn execute(cmd: Command) -> anyhow::Result<bool> {
    match cmd {
        Command::ListChecks => {
            print!("{}", render_catalog());
            Ok(true)
        }
        Command::Validate { config } => {
            load(&config)?;
            println!("{}: ok", config.display());
            Ok(true)
        }
        Command::Run { config, out, jobs } => {
            let cfg = load(&config)?;
            if let Some(n) = jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .context("configuring the thread pool")?;
            }
            let dir = out
                .or_else(|| cfg.output.as_ref().map(PathBuf::from))
                .or_else(|| std::env::var_os("CYLWAVE_OUT").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("cylwave-out"));
            let result = run(&cfg)?;
            write_bundle(&result, &dir).with_context(|| format!("writing {}", dir.display()))?;
            for c in &result.report.checks {
                println!("{:<4} {}", if c.passed { "PASS" } else { "FAIL" }, c.check);
                for n in &c.notes {
                    println!("     {n}");
                }
            }
            println!("report: {}", dir.join("report.json").display());
            Ok(result.passed())
        }
    }
}
