use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use drawdown::commands;
use drawdown::format::{self, SimConfigFile, SweepSpec};
use drawdown::runner;
use drawdown::verify::{self, VerifyOptions};
use drawdown::CliError;

/// Minimum probability of drawdown for a portfolio with a deterministic
/// payout rate.
///
/// Exit codes: 0 ok, 1 bad input, 2 domain error, 3 numerical failure,
/// 4 verification failure.
#[derive(Debug, Parser)]
#[command(name = "drawdown", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate phi, the optimal amount, g and k at one state.
    Evaluate {
        problem: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        w: f64,
        #[arg(long, allow_negative_numbers = true)]
        m: f64,
        /// Clamp w into the domain instead of failing.
        #[arg(long)]
        allow_outside: bool,
    },
    /// Evaluate columns over a (w, m) grid and write CSV.
    Sweep {
        problem: PathBuf,
        spec: PathBuf,
        /// Output CSV path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Monte Carlo estimate of the drawdown probability.
    Simulate {
        problem: PathBuf,
        config: PathBuf,
        /// optimal, constant_amount, constant_fraction or all_safe.
        #[arg(long, default_value = "optimal")]
        strategy: String,
        #[arg(long)]
        w0: f64,
        #[arg(long)]
        m0: f64,
        /// Amount for constant_amount; defaults to the optimal amount at w0.
        #[arg(long)]
        pi: Option<f64>,
        /// Fraction for constant_fraction.
        #[arg(long)]
        theta: Option<f64>,
        /// CSV file the result row is appended to.
        #[arg(long, default_value = "results.csv")]
        results: PathBuf,
        /// Scenario label for the results row; defaults to the problem file stem.
        #[arg(long)]
        scenario_id: Option<String>,
    },
    /// Probe the Feller function v towards the safe level.
    Feller {
        problem: PathBuf,
        #[arg(long)]
        m: f64,
        #[arg(long, default_value_t = 12)]
        probes: usize,
    },
    /// Run the oracle and invariant checks.
    Verify {
        /// Problem to check; the canonical constant payout if omitted.
        problem: Option<PathBuf>,
        /// Skip the Monte Carlo check.
        #[arg(long)]
        fast: bool,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_stdout(&format!("{text}\n"))
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn write_stdout(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn scenario_from(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Evaluate {
            problem,
            w,
            m,
            allow_outside,
        } => {
            let p = format::load_problem(&problem)?;
            print_json(&commands::evaluate(&p, w, m, allow_outside)?)
        }
        Command::Sweep { problem, spec, out } => {
            let p = format::load_problem(&problem)?;
            let spec = SweepSpec::parse(&format::read_text(&spec)?)?;
            let result = commands::sweep(&p, &spec)?;
            fs::write(&out, &result.csv).map_err(|e| CliError::io(&out, e))?;
            eprintln!(
                "{} rows written to {}; {} grid points outside the domain skipped",
                result.rows,
                out.display(),
                result.skipped
            );
            Ok(())
        }
        Command::Simulate {
            problem,
            config,
            strategy,
            w0,
            m0,
            pi,
            theta,
            results,
            scenario_id,
        } => {
            let p = format::load_problem(&problem)?;
            let cfg = SimConfigFile::parse(&format::read_text(&config)?)?.build()?;
            let s = commands::parse_strategy(&strategy, pi, theta, &p, w0)?;
            let id = scenario_id.unwrap_or_else(|| scenario_from(&problem));
            let report = commands::simulate(&p, &cfg, &s, w0, m0, &id, runner::thread_count())?;
            print_json(&report)?;
            format::append_result_row(&results, &report.row())
        }
        Command::Feller { problem, m, probes } => {
            let p = format::load_problem(&problem)?;
            print_json(&commands::feller(&p, m, probes)?)
        }
        Command::Verify { problem, fast } => {
            let text = problem.as_deref().map(format::read_text).transpose()?;
            let options = VerifyOptions {
                fast,
                threads: runner::thread_count(),
            };
            let checks = verify::run(text.as_deref(), &options)?;
            let report: String = checks.iter().map(|c| format!("{c}\n")).collect();
            write_stdout(&report)?;
            match verify::failures(&checks) {
                0 => Ok(()),
                n => Err(CliError::Verify(n)),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drawdown: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
