//! End-to-end self check: independent routes to `g`, boundary and pasting
//! conditions, the HJB residual, the comparison property and a Monte Carlo
//! run against the analytic value.

use std::fmt;

use drawdown_core::model::{DrawdownProblem, MarketParams, PayoutSpec, Regime};
use drawdown_core::oracle;
use drawdown_core::policy;
use drawdown_core::simulate::{SimConfig, Strategy};
use drawdown_core::{ScaleContext, Tolerance};

use crate::error::CliError;
use crate::format::ProblemFile;
use crate::runner;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, ok: bool, detail: String) -> Check {
    Check {
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skip(name: &'static str, why: &str) -> Check {
    Check {
        name,
        status: Status::Skip,
        detail: why.to_string(),
    }
}

fn failed(name: &'static str, e: impl fmt::Display) -> Check {
    check(name, false, format!("error: {e}"))
}

/// Relative agreement required between routes to `g`.
pub const ROUTE_TOL: f64 = 1e-7;
pub const HJB_TOL: f64 = 1e-3;
pub const COMPARISON_SLACK: f64 = 1e-8;

pub fn canonical_market() -> MarketParams {
    MarketParams::new(0.02, 0.08, 0.2).expect("canonical market is valid")
}

/// Constant payout 0.05, `r = 0.02`, `μ = 0.08`, `σ = 0.2`, `α = 0.5`.
pub fn canonical_problem() -> DrawdownProblem {
    constant_problem(0.05)
}

pub fn constant_problem(c: f64) -> DrawdownProblem {
    DrawdownProblem::new(canonical_market(), PayoutSpec::Constant { c }, 0.5).expect("constant payout is valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub fast: bool,
    pub threads: usize,
}

/// Runs the suite on the problem in `file_text`, or on the canonical problem
/// when `None`. JSON errors are parse errors; a problem that fails validation
/// is reported as a failed check.
pub fn run(file_text: Option<&str>, options: &VerifyOptions) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let problem = match file_text {
        None => Some(canonical_problem()),
        Some(text) => {
            let file = ProblemFile::parse(text)?;
            match file.build() {
                Ok(p) => {
                    checks.push(check("validation", true, format!("regime {}", p.regime().name())));
                    Some(p)
                }
                Err(e) => {
                    checks.push(check("validation", false, e.to_string()));
                    None
                }
            }
        }
    };
    if let Some(problem) = &problem {
        match ScaleContext::new(problem.clone(), Tolerance::default()) {
            Ok(ctx) => {
                checks.push(routes(&ctx));
                checks.push(boundary(&ctx));
                checks.push(hjb(&ctx));
            }
            Err(e) => checks.push(failed("scale", e)),
        }
    }
    checks.push(comparison());
    if options.fast {
        checks.push(skip("monte_carlo", "--fast"));
    } else {
        checks.push(monte_carlo(options.threads));
    }
    Ok(checks)
}

pub fn failures(checks: &[Check]) -> usize {
    checks.iter().filter(|c| c.status == Status::Fail).count()
}

/// Maxima to test at: spread over `(m_lo, w_s)` for finite `w_s`, where
/// `m_lo` respects the quadratic guard.
fn sample_maxima(problem: &DrawdownProblem, n: usize) -> Vec<f64> {
    let ws = problem.safe_level();
    let (lo, hi) = if ws.is_finite() {
        let guard = problem
            .payout()
            .quadratic_guard(problem.market())
            .map_or(0.0, |g| g / problem.alpha());
        ((0.4 * ws).max(guard * (1.0 + 1e-6)), ws)
    } else {
        (1.0, 4.0)
    };
    (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect()
}

fn routes(ctx: &ScaleContext) -> Check {
    const NAME: &str = "oracle_routes";
    let problem = ctx.problem();
    let market = problem.market();
    let alpha = problem.alpha();
    let ws = problem.safe_level();
    let mut worst: f64 = 0.0;
    let mut routes = vec!["quadrature", "ode"];
    let closed = |m: f64, w: f64| -> Option<Result<f64, oracle::OracleError>> {
        match *problem.payout() {
            PayoutSpec::Constant { c } => Some(oracle::g_constant_closed(c, market, alpha, m, w)),
            PayoutSpec::QuadraticSafe { b, ws } => Some(oracle::g_example41_closed(b, ws, market, alpha, m, w, ctx.tol())),
            _ => None,
        }
    };
    if closed(1.0, 0.5).is_some() {
        routes.push("closed form");
    }
    for m in sample_maxima(problem, 3) {
        let lo = alpha * m;
        let hi = if ws.is_finite() { ws } else { 4.0 * m };
        let targets: Vec<f64> = (0..20).map(|j| lo + (hi - lo) * j as f64 / 20.0).collect();
        let ode = match oracle::g_ode_oracle(problem, m, &targets) {
            Ok(v) => v,
            Err(e) => return failed(NAME, e),
        };
        for p in ode {
            let quad = match ctx.g(p.w, m) {
                Ok(g) => g,
                Err(e) => return failed(NAME, e),
            };
            let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / b.abs().max(f64::MIN_POSITIVE) };
            worst = worst.max(rel(p.g, quad));
            if let Some(c) = closed(m, p.w) {
                match c {
                    Ok(c) => worst = worst.max(rel(c, quad)),
                    Err(e) => return failed(NAME, e),
                }
            }
        }
    }
    check(
        NAME,
        worst <= ROUTE_TOL,
        format!("{} agree to {worst:.2e} relative (limit {ROUTE_TOL:e})", routes.join(", ")),
    )
}

fn boundary(ctx: &ScaleContext) -> Check {
    const NAME: &str = "boundary_conditions";
    let problem = ctx.problem();
    let ws = problem.safe_level();
    let alpha = problem.alpha();
    if let Regime::InfiniteSafeCertainDrawdown { .. } = problem.regime() {
        let mut all_one = true;
        for m in sample_maxima(problem, 4) {
            for f in [alpha, 0.5 * (1.0 + alpha), 1.0] {
                match policy::phi(ctx, f * m, m) {
                    Ok(v) => all_one &= v.value == 1.0,
                    Err(e) => return failed(NAME, e),
                }
            }
        }
        let k = ctx.k(2.0);
        return check(NAME, all_one && k == Ok(0.0), format!("phi = 1 on samples, k(2) = {k:?}"));
    }
    if !ws.is_finite() {
        return skip(NAME, "infinite safe level without certain drawdown");
    }
    let mut worst_barrier: f64 = 0.0;
    let mut worst_pasting: f64 = 0.0;
    for m in sample_maxima(problem, 5) {
        let barrier = policy::phi(ctx, alpha * m, m).map(|v| (v.value - 1.0).abs());
        let h = 1e-5 * (ws - alpha * m);
        let pasting = policy::smooth_pasting(ctx, m, h).map(f64::abs);
        match (barrier, pasting) {
            (Ok(b), Ok(p)) => {
                worst_barrier = worst_barrier.max(b);
                worst_pasting = worst_pasting.max(p);
            }
            (Err(e), _) | (_, Err(e)) => return failed(NAME, e),
        }
    }
    let mut worst_safe: f64 = 0.0;
    for m in [ws, 1.2 * ws] {
        if alpha * m > ws {
            continue;
        }
        match policy::phi(ctx, ws, m) {
            Ok(v) => worst_safe = worst_safe.max(v.value.abs()),
            Err(e) => return failed(NAME, e),
        }
    }
    check(
        NAME,
        worst_barrier == 0.0 && worst_safe == 0.0 && worst_pasting <= policy::PASTING_TOL,
        format!(
            "|phi(am,m)-1| = {worst_barrier:e}, |phi(ws,m)| = {worst_safe:e}, max |d_m phi(m,m)| = {worst_pasting:.2e}"
        ),
    )
}

fn hjb(ctx: &ScaleContext) -> Check {
    const NAME: &str = "hjb_residual";
    let problem = ctx.problem();
    let ws = problem.safe_level();
    if !ws.is_finite() {
        return skip(NAME, "needs a finite safe level");
    }
    let alpha = problem.alpha();
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for m in sample_maxima(problem, 5) {
        let hi = m.min(ws);
        let width = hi - alpha * m;
        let h = 1e-4 * width;
        for i in 1..=10 {
            let w = alpha * m + width * i as f64 / 11.0;
            match policy::hjb_residual(ctx, w, m, h) {
                Ok(r) => {
                    worst = worst.max(r.abs());
                    points += 1;
                }
                Err(e) => return failed(NAME, e),
            }
        }
    }
    check(
        NAME,
        worst <= HJB_TOL,
        format!("max residual {worst:.2e} over {points} points (limit {HJB_TOL:e})"),
    )
}

/// `phi` under `Constant(0.04)` never exceeds `phi` under `Constant(0.05)`.
pub fn comparison() -> Check {
    const NAME: &str = "comparison";
    let low = constant_problem(0.04);
    let high = constant_problem(0.05);
    let (Ok(c0), Ok(c1)) = (
        ScaleContext::new(low.clone(), Tolerance::default()),
        ScaleContext::new(high.clone(), Tolerance::default()),
    ) else {
        return failed(NAME, "scale context");
    };
    let mut worst = f64::NEG_INFINITY;
    let mut points = 0;
    for m in (0..5).map(|i| 0.8 + 0.5 * i as f64) {
        for w in (0..20).map(|i| 0.4 + 0.1 * i as f64) {
            if low.state_point(w, m).is_err() || high.state_point(w, m).is_err() {
                continue;
            }
            match (policy::phi(&c0, w, m), policy::phi(&c1, w, m)) {
                (Ok(p0), Ok(p1)) => worst = worst.max(p0.value - p1.value),
                (Err(e), _) | (_, Err(e)) => return failed(NAME, e),
            }
            points += 1;
        }
    }
    check(
        NAME,
        worst <= COMPARISON_SLACK,
        format!("max phi0 - phi1 = {worst:.2e} over {points} points"),
    )
}

/// Optimal strategy from `(w0, m0) = (2, 3)` against `phi(2, 3)`.
pub fn monte_carlo(threads: usize) -> Check {
    const NAME: &str = "monte_carlo";
    let problem = canonical_problem();
    let analytic = match ScaleContext::new(problem.clone(), Tolerance::default())
        .map_err(CliError::from)
        .and_then(|ctx| policy::phi(&ctx, 2.0, 3.0).map_err(CliError::from))
    {
        Ok(v) => v.value,
        Err(e) => return failed(NAME, e),
    };
    let config = match SimConfig::new(1e-3, 200.0, 20_000, 20_240_601) {
        Ok(c) => c,
        Err(e) => return failed(NAME, e),
    };
    match runner::estimate_parallel(&problem, &Strategy::Optimal, 2.0, 3.0, &config, threads) {
        Ok(est) => {
            let gap = (est.p_drawdown - analytic).abs();
            let allowed = 3.0 * est.stderr + 0.01;
            check(
                NAME,
                gap <= allowed && est.censored_fraction() < 0.005,
                format!(
                    "p_hat {:.5} +- {:.5} vs phi {analytic:.5} (|gap| {gap:.5} <= {allowed:.5}), censored {:.3}%",
                    est.p_drawdown,
                    est.stderr,
                    100.0 * est.censored_fraction()
                ),
            )
        }
        Err(e) => failed(NAME, e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OPTIONS: VerifyOptions = VerifyOptions { fast: true, threads: 1 };

    #[test]
    fn canonical_suite_passes() {
        let checks = run(None, &OPTIONS).unwrap();
        for c in &checks {
            assert_ne!(c.status, Status::Fail, "{c}");
        }
        assert_eq!(checks.last().unwrap().status, Status::Skip);
    }

    #[test]
    fn decreasing_table_fails_validation() {
        let text = r#"{"market":{"r":0.02,"mu":0.08,"sigma":0.2},
            "payout":{"kind":"tabulated","knots":[[0,0.06],[4,0.01]]},"alpha":0.5}"#;
        let checks = run(Some(text), &OPTIONS).unwrap();
        assert_eq!(checks[0].name, "validation");
        assert_eq!(checks[0].status, Status::Fail);
        assert_eq!(failures(&checks), 1);
    }

    #[test]
    fn other_payouts() {
        for payout in [
            r#"{"kind":"quadratic_safe","b":0.004,"ws":2.5}"#,
            r#"{"kind":"proportional","kappa":0.03}"#,
            r#"{"kind":"tabulated","knots":[[0,0.04],[2,0.05],[4,0.06]]}"#,
        ] {
            let alpha = if payout.contains("proportional") { 0.8 } else { 0.5 };
            let text = format!(r#"{{"market":{{"r":0.02,"mu":0.08,"sigma":0.2}},"payout":{payout},"alpha":{alpha}}}"#);
            let checks = run(Some(&text), &OPTIONS).unwrap();
            assert_eq!(failures(&checks), 0, "{payout}: {checks:#?}");
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert_eq!(run(Some("{"), &OPTIONS).unwrap_err().exit_code(), 1);
    }
}
