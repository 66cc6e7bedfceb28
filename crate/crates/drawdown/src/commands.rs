//! Command bodies, independent of argument parsing so tests can call them.

use std::sync::Arc;

use drawdown_core::model::{DrawdownProblem, Regime};
use drawdown_core::policy::{self, PhiSlice};
use drawdown_core::scale::{FellerVerdict, ScaleError, SlopeCondition};
use drawdown_core::simulate::{SimConfig, Strategy};
use drawdown_core::{ScaleContext, Tolerance};
use serde::Serialize;

use crate::error::CliError;
use crate::format::{self, json_number, Output, ResultRow, SweepSpec};
use crate::memo::SharedMemo;
use crate::runner;

pub fn context(problem: &DrawdownProblem) -> Result<ScaleContext, CliError> {
    Ok(ScaleContext::new(problem.clone(), Tolerance::default())?)
}

/// `k(m)`, or `None` where only the ratio limit defining `phi` exists.
fn k_reported(ctx: &ScaleContext, m: f64) -> Result<Option<f64>, CliError> {
    match ctx.k(m) {
        Ok(k) => Ok(Some(k)),
        Err(ScaleError::IndeterminateLimit { .. }) if matches!(ctx.problem().regime(), Regime::InfiniteSafeOther) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateReport {
    pub phi: f64,
    pub branch: &'static str,
    pub pi_star: f64,
    pub g: f64,
    pub k_of_m: Option<f64>,
    pub w_s: Option<f64>,
    pub regime: &'static str,
}

/// Point evaluation. With `allow_outside`, `w` is clamped into
/// `[αm, min(m, w_s)]` first, so wealth above a reached safe level reports
/// `phi = 0`.
pub fn evaluate(problem: &DrawdownProblem, w: f64, m: f64, allow_outside: bool) -> Result<EvaluateReport, CliError> {
    let ws = problem.safe_level();
    let w = if allow_outside && w.is_finite() && m.is_finite() && m > 0.0 {
        let lo = problem.alpha() * m;
        let hi = m.min(ws);
        if lo <= hi {
            w.clamp(lo, hi)
        } else {
            w
        }
    } else {
        w
    };
    problem.state_point(w, m)?;
    let ctx = context(problem)?;
    let phi = policy::phi(&ctx, w, m)?;
    Ok(EvaluateReport {
        phi: phi.value,
        branch: phi.branch.name(),
        pi_star: policy::pi_star_extended(problem, w, m),
        g: ctx.g(w, m)?,
        k_of_m: k_reported(&ctx, m)?,
        w_s: json_number(ws),
        regime: problem.regime().name(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub csv: String,
    pub rows: usize,
    pub skipped: usize,
}

struct MColumn<'a> {
    slice: PhiSlice<'a>,
    k: Option<f64>,
}

/// Evaluates the requested columns on the grid, `w`-major, skipping points
/// outside the domain. Each `m` gets one slice, built on first use.
pub fn sweep(problem: &DrawdownProblem, spec: &SweepSpec) -> Result<SweepOutput, CliError> {
    let ctx = context(problem)?.with_memo(Arc::new(SharedMemo::default()));
    let columns = spec.columns();
    let ws = problem.safe_level();
    let m_points = spec.m_grid.points();
    let mut cache: Vec<Option<MColumn<'_>>> = m_points.iter().map(|_| None).collect();

    let mut header = vec!["w", "m"];
    header.extend(columns.iter().map(Output::column));
    let mut rows = Vec::new();
    let mut skipped = 0;
    for w in spec.w_grid.points() {
        for (j, &m) in m_points.iter().enumerate() {
            if problem.state_point(w, m).is_err() {
                skipped += 1;
                continue;
            }
            if cache[j].is_none() {
                let k = if columns.contains(&Output::K) { k_reported(&ctx, m)? } else { None };
                cache[j] = Some(MColumn {
                    slice: PhiSlice::new(&ctx, m)?,
                    k,
                });
            }
            let col = cache[j].as_ref().expect("filled above");
            let mut row = vec![format::csv_number(w), format::csv_number(m)];
            for c in &columns {
                let value = match c {
                    Output::Phi => policy::phi_on_slice(&col.slice, w)?.value,
                    Output::PiStar => policy::pi_star_extended(problem, w, m),
                    Output::G => ctx.g(w, m)?,
                    Output::K => col.k.unwrap_or(f64::NAN),
                    Output::V if w < ws => ctx.v(w, m)?,
                    Output::V => f64::NAN,
                };
                row.push(format::csv_number(value));
            }
            rows.push(row);
        }
    }
    let mut csv = Vec::new();
    format::write_csv(&mut csv, &header, &rows).map_err(|e| CliError::Numerical(e.to_string()))?;
    Ok(SweepOutput {
        csv: String::from_utf8(csv).expect("csv output is UTF-8"),
        rows: rows.len(),
        skipped,
    })
}

/// Resolves a strategy name. `constant_amount` defaults to `π*(w0)`.
pub fn parse_strategy(
    name: &str,
    pi: Option<f64>,
    theta: Option<f64>,
    problem: &DrawdownProblem,
    w0: f64,
) -> Result<Strategy, CliError> {
    let strategy = match name {
        "optimal" => Strategy::Optimal,
        "all_safe" => Strategy::AllSafe,
        "constant_amount" => Strategy::ConstantAmount {
            pi: pi.unwrap_or_else(|| policy::pi_star(problem, w0)),
        },
        "constant_fraction" => Strategy::ConstantFraction {
            theta: theta.ok_or_else(|| CliError::Parse("constant_fraction needs --theta".into()))?,
        },
        other => {
            return Err(CliError::Parse(format!(
                "unknown strategy {other:?}; expected optimal, constant_amount, constant_fraction or all_safe"
            )))
        }
    };
    strategy.validate()?;
    Ok(strategy)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub scenario_id: String,
    pub strategy: &'static str,
    pub w0: f64,
    pub m0: f64,
    pub n_paths: u64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub p_drawdown: f64,
    pub stderr: f64,
    pub n_drawdown: u64,
    pub n_safe_absorbed: u64,
    pub n_censored: u64,
    pub mean_hit_time: Option<f64>,
}

impl SimulateReport {
    pub fn row(&self) -> ResultRow {
        ResultRow {
            scenario_id: self.scenario_id.clone(),
            strategy: self.strategy.to_string(),
            n_paths: self.n_paths,
            dt: self.dt,
            horizon: self.horizon,
            p_drawdown: self.p_drawdown,
            stderr: self.stderr,
            n_safe: self.n_safe_absorbed,
            n_censored: self.n_censored,
            mean_hit_time: self.mean_hit_time.unwrap_or(f64::NAN),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    problem: &DrawdownProblem,
    config: &SimConfig,
    strategy: &Strategy,
    w0: f64,
    m0: f64,
    scenario_id: &str,
    threads: usize,
) -> Result<SimulateReport, CliError> {
    let est = runner::estimate_parallel(problem, strategy, w0, m0, config, threads)?;
    Ok(SimulateReport {
        scenario_id: scenario_id.to_string(),
        strategy: strategy.name(),
        w0,
        m0,
        n_paths: est.n_paths,
        dt: config.dt,
        horizon: config.horizon,
        seed: config.seed,
        p_drawdown: est.p_drawdown,
        stderr: est.stderr,
        n_drawdown: est.n_drawdown,
        n_safe_absorbed: est.n_safe_absorbed,
        n_censored: est.n_censored,
        mean_hit_time: json_number(est.mean_hit_time),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub k: usize,
    pub w: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FellerOutput {
    pub m: f64,
    pub w_s: f64,
    pub probes: Vec<Probe>,
    pub verdict: &'static str,
    pub v_limit: Option<f64>,
    /// `"holds"` when `-K < c' - r < -1/K` just below `w_s`.
    pub slope_condition: &'static str,
    pub slope_bound: Option<f64>,
    pub eps: f64,
}

pub fn feller(problem: &DrawdownProblem, m: f64, probes: usize) -> Result<FellerOutput, CliError> {
    let ws = problem.safe_level();
    if !ws.is_finite() {
        return Err(CliError::Domain(format!(
            "the Feller diagnostic needs a finite safe level; regime is {}",
            problem.regime().name()
        )));
    }
    problem.state_point(problem.alpha() * m, m)?;
    let report = context(problem)?.feller_report(m, probes)?;
    let (verdict, v_limit) = match report.verdict {
        FellerVerdict::DivergesAtSafeLevel => ("DivergesAtSafeLevel", None),
        FellerVerdict::ConvergesAtSafeLevel { v_limit } => ("ConvergesAtSafeLevel", Some(v_limit)),
        FellerVerdict::Inconclusive => ("Inconclusive", None),
    };
    let (slope_condition, slope_bound, eps) = match report.slope_condition {
        SlopeCondition::Holds { k, eps } => ("holds", Some(k), eps),
        SlopeCondition::Fails { eps } => ("fails", None, eps),
        SlopeCondition::NotApplicable { eps } => ("not_applicable", None, eps),
    };
    Ok(FellerOutput {
        m,
        w_s: ws,
        probes: report
            .probes
            .iter()
            .enumerate()
            .map(|(i, &(w, v))| Probe { k: i + 1, w, v })
            .collect(),
        verdict,
        v_limit,
        slope_condition,
        slope_bound,
        eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::GridSpec;
    use drawdown_core::model::{MarketParams, PayoutSpec};

    fn problem(payout: PayoutSpec) -> DrawdownProblem {
        let market = MarketParams::new(0.02, 0.08, 0.2).unwrap();
        DrawdownProblem::new(market, payout, 0.5).unwrap()
    }

    #[test]
    fn evaluate_boundary_and_clamping() {
        let p = problem(PayoutSpec::Constant { c: 0.05 });
        let at_barrier = evaluate(&p, 1.0, 2.0, false).unwrap();
        assert_eq!((at_barrier.phi, at_barrier.branch), (1.0, "Boundary"));
        assert_eq!(at_barrier.g, 0.0);
        let ruin = evaluate(&p, 2.0, 3.0, false).unwrap();
        assert!((ruin.phi - 0.5f64.powf(3.25)).abs() < 1e-9);
        assert_eq!((ruin.branch, ruin.k_of_m), ("RuinBranch", Some(1.0)));
        assert_eq!(evaluate(&p, 2.7, 3.0, false).unwrap_err().exit_code(), 2);
        let above = evaluate(&p, 2.7, 3.0, true).unwrap();
        assert_eq!(above.phi, 0.0);
    }

    #[test]
    fn evaluate_certain_drawdown() {
        let p = problem(PayoutSpec::Proportional { kappa: 0.03 }).with_alpha(0.8).unwrap();
        let r = evaluate(&p, 1.5, 1.6, false).unwrap();
        assert_eq!((r.phi, r.regime, r.w_s, r.k_of_m), (1.0, "InfiniteSafeCertainDrawdown", None, Some(0.0)));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"w_s\":null"));
    }

    #[test]
    fn sweep_is_w_major_and_skips_outside() {
        let p = problem(PayoutSpec::Constant { c: 0.05 });
        let spec = SweepSpec {
            w_grid: GridSpec { min: 0.5, max: 2.5, count: 5 },
            m_grid: GridSpec { min: 2.0, max: 3.0, count: 2 },
            outputs: vec![Output::V, Output::Phi],
        };
        let out = sweep(&p, &spec).unwrap();
        let lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(lines[0], "w,m,phi,v");
        assert_eq!(out.rows + out.skipped, 10);
        assert_eq!(lines.len(), out.rows + 1);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!((first[0], first[1], first[2]), ("1", "2", "1"));
        let ws_row = lines.iter().find(|l| l.starts_with("2.5,3,")).unwrap();
        assert_eq!(*ws_row, "2.5,3,0,");
    }

    #[test]
    fn strategies_by_name() {
        let p = problem(PayoutSpec::Constant { c: 0.05 });
        let frozen = parse_strategy("constant_amount", None, None, &p, 2.0).unwrap();
        assert_eq!(frozen, Strategy::ConstantAmount { pi: policy::pi_star(&p, 2.0) });
        assert!((policy::pi_star(&p, 2.0) - 1.0 / 3.0).abs() < 1e-12);
        assert!(parse_strategy("constant_fraction", None, None, &p, 2.0).is_err());
        assert!(parse_strategy("bold", None, None, &p, 2.0).is_err());
    }

    #[test]
    fn feller_outputs() {
        let constant = feller(&problem(PayoutSpec::Constant { c: 0.05 }), 2.0, 12).unwrap();
        assert_eq!((constant.verdict, constant.slope_condition), ("DivergesAtSafeLevel", "holds"));
        assert_eq!(constant.probes.len(), 12);
        let quad = feller(&problem(PayoutSpec::QuadraticSafe { b: 0.004, ws: 2.5 }), 2.0, 12).unwrap();
        assert_eq!((quad.verdict, quad.slope_condition), ("DivergesAtSafeLevel", "fails"));
        let prop = feller(&problem(PayoutSpec::Proportional { kappa: 0.03 }), 2.0, 12);
        assert_eq!(prop.unwrap_err().exit_code(), 2);
    }
}
