//! JSON input files and CSV output rows.
//!
//! Problem file:
//!
//! ```json
//! { "market": { "r": 0.02, "mu": 0.08, "sigma": 0.2 },
//!   "payout": { "kind": "constant", "c": 0.05 },
//!   "alpha": 0.5 }
//! ```
//!
//! Payout kinds: `constant {c}`, `proportional {kappa}`, `affine {a, b}`,
//! `quadratic_safe {b, ws}`, `tabulated {knots: [[w, c], ...]}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use drawdown_core::model::{DrawdownProblem, MarketParams, PayoutSpec, Tabulated};
use drawdown_core::simulate::SimConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketFile {
    pub r: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoutFile {
    Constant { c: f64 },
    Proportional { kappa: f64 },
    Affine { a: f64, b: f64 },
    QuadraticSafe { b: f64, ws: f64 },
    Tabulated { knots: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub market: MarketFile,
    pub payout: PayoutFile,
    pub alpha: f64,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("problem file: {e}")))
    }

    /// Builds and validates the problem.
    pub fn build(&self) -> Result<DrawdownProblem, CliError> {
        let m = &self.market;
        let market = MarketParams::new(m.r, m.mu, m.sigma)?;
        let payout = match &self.payout {
            PayoutFile::Constant { c } => PayoutSpec::Constant { c: *c },
            PayoutFile::Proportional { kappa } => PayoutSpec::Proportional { kappa: *kappa },
            PayoutFile::Affine { a, b } => PayoutSpec::Affine { a: *a, b: *b },
            PayoutFile::QuadraticSafe { b, ws } => PayoutSpec::QuadraticSafe { b: *b, ws: *ws },
            PayoutFile::Tabulated { knots } => PayoutSpec::Tabulated(Tabulated::new(knots.clone())?),
        };
        Ok(DrawdownProblem::new(market, payout, self.alpha)?)
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_problem(path: &Path) -> Result<DrawdownProblem, CliError> {
    ProblemFile::parse(&read_text(path)?)
        .and_then(|p| p.build())
        .map_err(|e| match e {
            CliError::Parse(msg) => CliError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
}

/// `count` evenly spaced points from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridSpec {
    pub fn validate(&self, name: &str) -> Result<(), CliError> {
        if self.count < 2 {
            return Err(CliError::Parse(format!("{name}.count must be at least 2")));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(CliError::Parse(format!("{name} needs finite min <= max")));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| if i + 1 == self.count { self.max } else { self.min + i as f64 * step })
            .collect()
    }
}

/// Columns a sweep can emit, in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Phi,
    PiStar,
    G,
    K,
    V,
}

impl Output {
    pub const ALL: [Output; 5] = [Output::Phi, Output::PiStar, Output::G, Output::K, Output::V];

    pub fn column(&self) -> &'static str {
        match self {
            Output::Phi => "phi",
            Output::PiStar => "pi_star",
            Output::G => "g",
            Output::K => "k",
            Output::V => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub w_grid: GridSpec,
    pub m_grid: GridSpec,
    pub outputs: Vec<Output>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| CliError::Parse(format!("sweep spec: {e}")))?;
        spec.w_grid.validate("w_grid")?;
        spec.m_grid.validate("m_grid")?;
        Ok(spec)
    }

    /// Requested columns in canonical order, without duplicates.
    pub fn columns(&self) -> Vec<Output> {
        Output::ALL.into_iter().filter(|o| self.outputs.contains(o)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: u64,
    pub seed: u64,
    #[serde(default)]
    pub eps_safe: Option<f64>,
    #[serde(default)]
    pub eps_barrier: f64,
}

impl SimConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("simulation config: {e}")))
    }

    pub fn build(&self) -> Result<SimConfig, CliError> {
        let config = SimConfig {
            dt: self.dt,
            horizon: self.horizon,
            n_paths: self.n_paths,
            seed: self.seed,
            eps_safe: self.eps_safe,
            eps_barrier: self.eps_barrier,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Formats a float for CSV; non-finite values become an empty cell.
pub fn csv_number(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

/// JSON-safe float: non-finite values become `null`.
pub fn json_number(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// One line of the simulation results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario_id: String,
    pub strategy: String,
    pub n_paths: u64,
    pub dt: f64,
    pub horizon: f64,
    pub p_drawdown: f64,
    pub stderr: f64,
    pub n_safe: u64,
    pub n_censored: u64,
    pub mean_hit_time: f64,
}

pub const RESULT_HEADER: [&str; 10] = [
    "scenario_id",
    "strategy",
    "n_paths",
    "dt",
    "horizon",
    "p_drawdown",
    "stderr",
    "n_safe",
    "n_censored",
    "mean_hit_time",
];

impl ResultRow {
    fn record(&self) -> [String; 10] {
        [
            self.scenario_id.clone(),
            self.strategy.clone(),
            self.n_paths.to_string(),
            csv_number(self.dt),
            csv_number(self.horizon),
            csv_number(self.p_drawdown),
            csv_number(self.stderr),
            self.n_safe.to_string(),
            self.n_censored.to_string(),
            csv_number(self.mean_hit_time),
        ]
    }
}

/// Appends `row` to `path`, writing the header first if the file is new or
/// empty.
pub fn append_result_row(path: &Path, row: &ResultRow) -> Result<(), CliError> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let io_err = |e: csv::Error| CliError::io(path, e.into());
    if fresh {
        writer.write_record(RESULT_HEADER).map_err(io_err)?;
    }
    writer.write_record(row.record()).map_err(io_err)?;
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// Writes a header and rows of pre-formatted cells as CSV.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}
