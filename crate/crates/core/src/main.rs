//! Command-line front end: run scenario files and write their artifacts.
//!
//! Exit codes: 0 when every run completed and every check passed, 1 when a
//! run failed or a check did not pass, 2 for unusable scenarios or I/O
//! problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use passlab::scenario::{run_scenario, Overrides, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "passlab", version, about = "Simulate semilinear input-output systems and verify passivity and stability certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file, or every `*.toml` in a batch directory.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML). Omit when using --batch.
    scenario: Option<PathBuf>,
    /// Directory of scenario files to run in name order.
    #[arg(long, conflicts_with = "scenario")]
    batch: Option<PathBuf>,
    /// Output directory for report.json and timeseries.csv
    /// (per-scenario subdirectories in batch mode).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Override the number of spatial cells.
    #[arg(long)]
    n_cells: Option<usize>,
    /// Override the final time.
    #[arg(long)]
    t_end: Option<f64>,
    /// Override the random seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides { dt: self.dt, n_cells: self.n_cells, t_end: self.t_end, seed: self.seed }
    }
}

/// Outcome of one scenario, ordered so that `max` picks the worst.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RunStatus {
    Passed,
    CheckFailed,
    ConfigError,
}

fn error_status(err: &ScenarioError) -> RunStatus {
    if err.is_config_error() {
        RunStatus::ConfigError
    } else {
        RunStatus::CheckFailed
    }
}

fn run_one(path: &Path, overrides: &Overrides, out_dir: &Path) -> RunStatus {
    let mut scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return error_status(&e);
        }
    };
    scenario.apply_overrides(overrides);
    let name = scenario.name.clone().unwrap_or_else(|| "unnamed".into());
    let outcome = match run_scenario(&scenario) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{name}: {e}");
            return error_status(&e);
        }
    };
    if let Err(e) = outcome.write_to(out_dir) {
        eprintln!("{name}: cannot write outputs: {e}");
        return RunStatus::ConfigError;
    }
    let report = &outcome.report;
    let passed = report.checks.iter().filter(|c| c.passed).count();
    if report.all_passed {
        println!(
            "{name}: ok ({}/{} checks, {} steps, final |x| = {:.3e}) -> {}",
            passed,
            report.checks.len(),
            report.steps,
            report.final_state_norm,
            out_dir.display()
        );
        RunStatus::Passed
    } else {
        for check in report.checks.iter().filter(|c| !c.passed) {
            eprintln!("{name}: check '{}' failed: {}", check.kind, check.detail);
        }
        println!(
            "{name}: FAILED ({}/{} checks) -> {}",
            passed,
            report.checks.len(),
            out_dir.display()
        );
        RunStatus::CheckFailed
    }
}

fn run(args: &RunArgs) -> RunStatus {
    let overrides = args.overrides();
    match (&args.scenario, &args.batch) {
        (Some(path), None) => run_one(path, &overrides, &args.out),
        (None, Some(dir)) => {
            let mut files: Vec<PathBuf> = match std::fs::read_dir(dir) {
                Ok(entries) => entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
                    .collect(),
                Err(e) => {
                    eprintln!("{}: {e}", dir.display());
                    return RunStatus::ConfigError;
                }
            };
            files.sort();
            if files.is_empty() {
                eprintln!("{}: no scenario files found", dir.display());
                return RunStatus::ConfigError;
            }
            files
                .iter()
                .map(|path| {
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "scenario".into());
                    run_one(path, &overrides, &args.out.join(stem))
                })
                .max()
                .unwrap_or(RunStatus::Passed)
        }
        (None, None) => {
            eprintln!("nothing to run: pass a scenario file or --batch <dir>");
            RunStatus::ConfigError
        }
        (Some(_), Some(_)) => unreachable!("clap rejects scenario together with --batch"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match &cli.command {
        Command::Run(args) => run(args),
    };
    match status {
        RunStatus::Passed => ExitCode::SUCCESS,
        RunStatus::CheckFailed => ExitCode::from(1),
        RunStatus::ConfigError => ExitCode::from(2),
    }
}
