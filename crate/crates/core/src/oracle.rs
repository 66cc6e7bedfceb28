//! Independent routes to the scale function and the Feller function, used to
//! check the quadrature route: closed forms for the constant and quadratic
//! payouts, an ODE integration of `g`, and residual scans of `h^N`.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::model::{tie, DrawdownProblem, MarketParams};
use crate::numerics::{self, NumericsError, Tolerance};
use crate::policy::{self, PhiSlice, PolicyError};
use crate::scale::{ScaleContext, ScaleError};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum OracleError {
    #[error("outside the oracle's domain: {0}")]
    Domain(&'static str),
    #[error("ODE step underflow near w = {last_w} (last good g = {last_g})")]
    StepUnderflow { last_w: f64, last_g: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo - tie(lo) && x <= hi + tie(hi)
}

/// `g(w, m)` for `c(w) = c`:
/// `((c - rαm)^p - (c - rw)^p) / (r p (c - rαm)^(p-1))` with `p = δ/r + 1`.
pub fn g_constant_closed(c: f64, market: &MarketParams, alpha: f64, m: f64, w: f64) -> Result<f64, OracleError> {
    let r = market.r();
    let ws = c / r;
    let alpha_m = alpha * m;
    if !(c > 0.0 && within(alpha_m, 0.0, ws) && within(w, alpha_m, ws)) {
        return Err(OracleError::Domain("constant payout needs alpha*m <= w <= c/r"));
    }
    let p = market.delta() / r + 1.0;
    let top = c - r * alpha_m;
    let low = (c - r * w).max(0.0);
    Ok((math::powf(top, p) - math::powf(low, p)) / (r * p * math::powf(top, p - 1.0)))
}

fn example41_guard(b: f64, ws: f64, market: &MarketParams, alpha_m: f64, w: f64) -> Result<(), OracleError> {
    let guard = ws - market.r() / (2.0 * b);
    if !(b > 0.0 && ws > 0.0) {
        return Err(OracleError::Domain("quadratic payout needs b > 0 and ws > 0"));
    }
    if !(alpha_m >= guard - tie(guard) && within(w, alpha_m, ws)) {
        return Err(OracleError::Domain("quadratic payout needs ws - r/(2b) <= alpha*m <= w <= ws"));
    }
    Ok(())
}

/// `g(w, m) = e^{δ/(b(ws - αm))} ∫_{αm}^w e^{-δ/(b(ws - y))} dy` for
/// `c(w) = r w + b (ws - w)^2`. The prefactor is folded into the integrand.
pub fn g_example41_closed(
    b: f64,
    ws: f64,
    market: &MarketParams,
    alpha: f64,
    m: f64,
    w: f64,
    tol: &Tolerance,
) -> Result<f64, OracleError> {
    let alpha_m = alpha * m;
    example41_guard(b, ws, market, alpha_m, w)?;
    let delta = market.delta();
    let shift = delta / (b * (ws - alpha_m));
    let w = w.min(ws);
    let value = numerics::integrate(
        |y| {
            let e = delta / (b * (ws - y)) - shift;
            if e >= 745.0 {
                0.0
            } else {
                math::exp(-e)
            }
        },
        alpha_m,
        w,
        tol,
    )?;
    Ok(value)
}

/// `v(w, m)` for the constant payout:
/// `δ/(r(δ + r)) [ln(X/x) - (1 - (x/X)^p)/p]`, `X = ws - αm`, `x = ws - w`.
pub fn v_constant_closed(c: f64, market: &MarketParams, alpha: f64, m: f64, w: f64) -> Result<f64, OracleError> {
    let r = market.r();
    let ws = c / r;
    let alpha_m = alpha * m;
    if !(c > 0.0 && alpha_m < ws && w >= alpha_m && w < ws) {
        return Err(OracleError::Domain("constant payout v needs alpha*m <= w < c/r"));
    }
    let delta = market.delta();
    let p = delta / r + 1.0;
    let (big, small) = (ws - alpha_m, ws - w);
    Ok(delta / (r * (delta + r)) * (math::ln(big / small) - (1.0 - math::powf(small / big, p)) / p))
}

fn example41_v_parts(b: f64, ws: f64, market: &MarketParams, alpha_m: f64, w: f64) -> (f64, f64) {
    let delta = market.delta();
    let (big, small) = (ws - alpha_m, ws - w);
    let head = (1.0 / small - 1.0 / big) / b + 2.0 / delta * math::ln(small / big) + 2.0 * b / (delta * delta) * (w - alpha_m);
    let coef = 1.0 / (b * big * big) - 2.0 / (delta * big) + 2.0 * b / (delta * delta);
    (head, coef)
}

/// `v(w, m)` for the quadratic payout, from its closed display with the
/// remaining integral done by quadrature.
pub fn v_example41_closed(
    b: f64,
    ws: f64,
    market: &MarketParams,
    alpha: f64,
    m: f64,
    w: f64,
    tol: &Tolerance,
) -> Result<f64, OracleError> {
    let alpha_m = alpha * m;
    example41_guard(b, ws, market, alpha_m, w)?;
    if !(w < ws) {
        return Err(OracleError::Domain("v needs w < ws"));
    }
    let (head, coef) = example41_v_parts(b, ws, market, alpha_m, w);
    Ok(head - coef * g_example41_closed(b, ws, market, alpha, m, w, tol)?)
}

/// Elementary lower bound on the quadratic-payout `v`: the integral in the
/// closed display replaced by `w - αm`.
pub fn v_example41_lower_bound(b: f64, ws: f64, market: &MarketParams, alpha: f64, m: f64, w: f64) -> Result<f64, OracleError> {
    let alpha_m = alpha * m;
    example41_guard(b, ws, market, alpha_m, w)?;
    if !(w < ws) {
        return Err(OracleError::Domain("v needs w < ws"));
    }
    let (head, coef) = example41_v_parts(b, ws, market, alpha_m, w);
    let prefactor = math::exp(market.delta() / (b * (ws - alpha_m)));
    Ok(head - prefactor * coef * (w - alpha_m))
}

/// `g` and its derivative from the ODE route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdePoint {
    pub w: f64,
    pub g: f64,
    pub dg: f64,
}

const ODE_REL_TOL: f64 = 1e-12;
const ODE_MAX_STEPS: usize = 1 << 22;

fn rk4_segment(problem: &DrawdownProblem, a: f64, b: f64, state: (f64, f64), n: usize) -> (f64, f64) {
    let delta = problem.delta();
    let rhs = |w: f64, (_, q): (f64, f64)| (q, -delta / problem.excess(w) * q);
    let h = (b - a) / n as f64;
    let (mut g, mut q) = state;
    for i in 0..n {
        let w = a + i as f64 * h;
        let k1 = rhs(w, (g, q));
        let k2 = rhs(w + 0.5 * h, (g + 0.5 * h * k1.0, q + 0.5 * h * k1.1));
        let k3 = rhs(w + 0.5 * h, (g + 0.5 * h * k2.0, q + 0.5 * h * k2.1));
        let k4 = rhs(w + h, (g + h * k3.0, q + h * k3.1));
        g += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        q += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (g, q)
}

/// Integrates `g'' = -δ/(c(w) - r w) g'`, `g(αm) = 0`, `g'(αm) = 1` with
/// classical fourth-order Runge–Kutta, halving the step on each segment
/// between targets until two step sizes agree. Results come back in the
/// order of `targets`.
pub fn g_ode_oracle(problem: &DrawdownProblem, m: f64, targets: &[f64]) -> Result<Vec<OdePoint>, OracleError> {
    let alpha_m = problem.alpha() * m;
    let ws = problem.safe_level();
    let stop = if ws.is_finite() { ws - 1e-12 * ws } else { f64::INFINITY };
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&i, &j| targets[i].total_cmp(&targets[j]));

    let mut out = alloc::vec![OdePoint { w: 0.0, g: 0.0, dg: 0.0 }; targets.len()];
    let (mut w, mut state) = (alpha_m, (0.0, 1.0));
    for i in order {
        let target = targets[i];
        if !(target >= alpha_m - tie(alpha_m)) {
            return Err(OracleError::Domain("ODE targets must lie at or above alpha*m"));
        }
        if target >= stop {
            return Err(OracleError::StepUnderflow { last_w: w, last_g: state.0 });
        }
        if target > w {
            let mut n = 8;
            let mut coarse = rk4_segment(problem, w, target, state, n);
            loop {
                n *= 2;
                let fine = rk4_segment(problem, w, target, state, n);
                let close = |a: f64, b: f64| (a - b).abs() <= ODE_REL_TOL * b.abs().max(1e-300);
                if close(coarse.0, fine.0) && close(coarse.1, fine.1) {
                    state = fine;
                    break;
                }
                let h = (target - w) / n as f64;
                if n >= ODE_MAX_STEPS || h <= 4.0 * f64::EPSILON * target.abs() {
                    return Err(OracleError::StepUnderflow { last_w: w, last_g: state.0 });
                }
                coarse = fine;
            }
            if !(state.1 > 0.0 && state.0.is_finite()) {
                return Err(OracleError::StepUnderflow { last_w: w, last_g: state.0 });
            }
            w = target;
        }
        out[i] = OdePoint {
            w: target,
            g: state.0,
            dg: state.1,
        };
    }
    Ok(out)
}

/// Largest deviations of `h^N` from its boundary-value problem on a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvpScan {
    /// `max |(r w - c) h_w - δ h_w^2 / h_ww|` over interior grid points.
    pub ode: f64,
    /// `max |h^N(αm, m) - 1|` and `|h^N(N, N)|`.
    pub boundary: f64,
    /// `max |∂_m h^N(m, m)|`.
    pub pasting: f64,
}

impl BvpScan {
    pub fn max(&self) -> f64 {
        self.ode.max(self.boundary).max(self.pasting)
    }
}

/// Scans `h^N` on the `(w, m)` grid points inside `αm <= w <= m <= N`, with
/// finite-difference step `h` for both the ODE residual and the pasting
/// derivative.
pub fn bvp_residual_scan(ctx: &ScaleContext, n: f64, grid: &[(f64, f64)], h: f64) -> Result<BvpScan, OracleError> {
    bvp_scan_impl(ctx, n, grid, h, 0.0)
}

/// As [`bvp_residual_scan`] with `k` replaced by `k (1 + rel (N - m)/N)`, a
/// defect that leaves the boundary values intact but breaks pasting.
pub fn bvp_residual_scan_perturbed(
    ctx: &ScaleContext,
    n: f64,
    grid: &[(f64, f64)],
    h: f64,
    rel: f64,
) -> Result<BvpScan, OracleError> {
    bvp_scan_impl(ctx, n, grid, h, rel)
}

fn bvp_scan_impl(ctx: &ScaleContext, n: f64, grid: &[(f64, f64)], h: f64, rel: f64) -> Result<BvpScan, OracleError> {
    let problem = ctx.problem();
    let alpha = problem.alpha();
    if !(n <= problem.safe_level() && n > 0.0 && h > 0.0) {
        return Err(OracleError::Domain("scan needs 0 < N <= w_s and h > 0"));
    }
    let coef = |m: f64| -> Result<f64, OracleError> {
        Ok(ctx.h_n_coefficient(m, n)? * (1.0 + rel * (n - m) / n))
    };
    let value = |w: f64, m: f64| -> Result<f64, OracleError> { Ok(1.0 - coef(m)? * ctx.g(w, m)?) };

    let mut scan = BvpScan {
        ode: 0.0,
        boundary: (value(n, n)?).abs(),
        pasting: 0.0,
    };
    for &(w, m) in grid {
        if !(w >= alpha * m && w <= m && m <= n) {
            continue;
        }
        scan.boundary = scan.boundary.max((value(alpha * m, m)? - 1.0).abs());
        if w - h > alpha * m && w + h < n && rel == 0.0 {
            let slice = PhiSlice::h_n(ctx, m, n)?;
            let r = policy::hjb_residual_of(problem, &slice, w, h)?;
            scan.ode = scan.ode.max(r.abs());
        }
        if m + h <= n {
            let d = (value(m, m + h)? - value(m, m - h)?) / (2.0 * h);
            scan.pasting = scan.pasting.max(d.abs());
        }
    }
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PayoutSpec;
    use approx::assert_relative_eq;

    fn market() -> MarketParams {
        MarketParams::new(0.02, 0.08, 0.2).unwrap()
    }

    // Midpoint sums for both the inner and outer integral, accumulated in one
    // pass: no antiderivative, no adaptive quadrature.
    fn g_brute_force(c: f64, alpha_m: f64, w: f64, panels: usize) -> f64 {
        let (r, delta) = (0.02, 0.045);
        let h = (w - alpha_m) / panels as f64;
        let (mut exponent, mut g) = (0.0, 0.0);
        for i in 0..panels {
            let y0 = alpha_m + i as f64 * h;
            // exponent at the panel midpoint: running sum plus a half panel
            let half = 0.5 * h * delta / (c - r * (y0 + 0.25 * h));
            g += h * libm::exp(-(exponent + half));
            exponent += h * delta / (c - r * (y0 + 0.5 * h));
        }
        g
    }

    #[test]
    fn constant_closed_form_against_riemann_sums() {
        for (m, w) in [(2.0, 1.5), (2.0, 2.0), (3.0, 2.4), (4.0, 2.5)] {
            let closed = g_constant_closed(0.05, &market(), 0.5, m, w).unwrap();
            let brute = g_brute_force(0.05, 0.5 * m, w, 1_000_000);
            assert_relative_eq!(closed, brute, max_relative = 1e-9);
        }
        let g = g_constant_closed(0.05, &market(), 0.5, 2.0, 1.5).unwrap();
        assert!((g - 0.338).abs() < 5e-4, "{g}");
    }

    #[test]
    fn constant_closed_form_edges() {
        assert_eq!(g_constant_closed(0.05, &market(), 0.5, 2.0, 1.0).unwrap(), 0.0);
        let at_ws = g_constant_closed(0.05, &market(), 0.5, 2.0, 2.5).unwrap();
        assert_relative_eq!(at_ws, (0.05 - 0.02) / (0.02 * 3.25), max_relative = 1e-14);
        assert!(g_constant_closed(0.05, &market(), 0.5, 2.0, 2.6).is_err());
        assert!(g_constant_closed(0.05, &market(), 0.5, 2.0, 0.9).is_err());
    }

    #[test]
    fn example41_matches_scale_quadrature() {
        let (b, ws) = (0.004, 2.5);
        let problem = DrawdownProblem::new(market(), PayoutSpec::QuadraticSafe { b, ws }, 0.5).unwrap();
        let ctx = ScaleContext::new(problem, Tolerance::default()).unwrap();
        let tol = Tolerance::new(1e-13, 1e-12, 4096).unwrap();
        assert_eq!(g_example41_closed(b, ws, &market(), 0.5, 2.0, 1.0, &tol).unwrap(), 0.0);
        for w in [1.2, 1.8, 2.3, 2.49] {
            let closed = g_example41_closed(b, ws, &market(), 0.5, 2.0, w, &tol).unwrap();
            assert_relative_eq!(closed, ctx.g(w, 2.0).unwrap(), max_relative = 1e-8);
        }
        assert!(g_example41_closed(0.01, ws, &market(), 0.5, 2.0, 1.5, &tol).is_err());
    }

    #[test]
    fn ode_oracle_matches_closed_form() {
        let problem = DrawdownProblem::new(market(), PayoutSpec::Constant { c: 0.05 }, 0.5).unwrap();
        let targets = [2.4, 1.0, 1.7, 2.0];
        let points = g_ode_oracle(&problem, 2.0, &targets).unwrap();
        assert_eq!((points[1].g, points[1].dg), (0.0, 1.0));
        for p in &points {
            let closed = g_constant_closed(0.05, &market(), 0.5, 2.0, p.w).unwrap();
            assert_relative_eq!(p.g, closed, max_relative = 1e-8, epsilon = 1e-300);
            let dg = libm::pow((0.05 - 0.02 * p.w) / 0.03, 2.25);
            assert_relative_eq!(p.dg, dg, max_relative = 1e-8);
        }
        assert!(matches!(
            g_ode_oracle(&problem, 2.0, &[2.5]),
            Err(OracleError::StepUnderflow { .. })
        ));
    }

    #[test]
    fn v_closed_forms() {
        let v = v_constant_closed(0.05, &market(), 0.5, 2.0, 2.5 - 1.5 / 4096.0).unwrap();
        assert!(v > 270.0 && v < 285.0, "{v}");
        let (b, ws) = (0.004, 2.5);
        let tol = Tolerance::default();
        let mut previous = 0.0;
        for k in 1..=12 {
            let w = ws - 1.5 * libm::pow(2.0, -(k as f64));
            let v = v_example41_closed(b, ws, &market(), 0.5, 2.0, w, &tol).unwrap();
            let lower = v_example41_lower_bound(b, ws, &market(), 0.5, 2.0, w).unwrap();
            assert!(v >= lower && v > previous);
            previous = v;
        }
        assert!(previous > 1e3);
    }

    #[test]
    fn example41_routes_agree_next_to_the_safe_level() {
        let (b, ws) = (0.004, 2.5);
        let problem = DrawdownProblem::new(market(), PayoutSpec::QuadraticSafe { b, ws }, 0.5).unwrap();
        let ctx = ScaleContext::new(problem, Tolerance::default()).unwrap();
        let tol = Tolerance::new(1e-14, 1e-12, 4096).unwrap();
        for k in 1..=12 {
            let w = ws - 1.5 * libm::pow(2.0, -(k as f64));
            let closed = v_example41_closed(b, ws, &market(), 0.5, 2.0, w, &tol).unwrap();
            assert_relative_eq!(ctx.v(w, 2.0).unwrap(), closed, max_relative = 1e-7);
        }
        // alpha*m close to w_s: exp(-exponent) decays within ~1e-4 of alpha*m
        for (m, w) in [(4.96, 2.485), (4.99, 2.4999)] {
            let closed = g_example41_closed(b, ws, &market(), 0.5, m, w, &tol).unwrap();
            assert_relative_eq!(ctx.g(w, m).unwrap(), closed, max_relative = 1e-8);
        }
    }

    #[test]
    fn bvp_scan_detects_perturbed_k() {
        let problem = DrawdownProblem::new(market(), PayoutSpec::Constant { c: 0.05 }, 0.5).unwrap();
        let ctx = ScaleContext::new(problem, Tolerance::default()).unwrap();
        let grid: Vec<(f64, f64)> = [1.6, 1.9, 2.2]
            .iter()
            .flat_map(|&m| [0.6, 0.8, 1.0].map(|f| (f * m, m)))
            .collect();
        let clean = bvp_residual_scan(&ctx, 2.5, &grid, 1e-4).unwrap();
        assert!(clean.max() < 1e-6, "{clean:?}");
        assert_eq!(clean.boundary, 0.0);
        let broken = bvp_residual_scan_perturbed(&ctx, 2.5, &grid, 1e-4, 0.01).unwrap();
        assert!(broken.pasting > 1e-3, "{broken:?}");
    }
}
