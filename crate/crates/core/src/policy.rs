//! Optimal investment strategy, the minimum probability of drawdown `phi`,
//! and numerical checks of the equations `phi` must satisfy.

use alloc::vec::Vec;

use thiserror::Error;

use crate::model::{DomainError, DrawdownProblem, Regime};
use crate::scale::{ScaleContext, ScaleError};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error("second derivative {phi_ww} at w = {w} is below the rounding floor")]
    DegenerateSecondDerivative { w: f64, phi_ww: f64 },
    #[error("stencil [{lo}, {hi}] leaves the domain")]
    StencilOutsideDomain { lo: f64, hi: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

impl From<crate::numerics::NumericsError> for PolicyError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        PolicyError::Scale(e.into())
    }
}

/// Investment amount and the drift and volatility it induces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyEval {
    pub pi_star: f64,
    pub drift_b: f64,
    pub vol_s: f64,
}

/// `π*(w) = 2 (c(w) - r w) / (μ - r)`, for `0 < w <= w_s`.
pub fn pi_star(problem: &DrawdownProblem, w: f64) -> f64 {
    let market = problem.market();
    2.0 * problem.excess(w) / (market.mu() - market.r())
}

/// The optimal amount extended to all wealth: half of it below the barrier
/// `αm` (where it makes the drift vanish) and nothing above `w_s`.
pub fn pi_star_extended(problem: &DrawdownProblem, w: f64, m: f64) -> f64 {
    let market = problem.market();
    let premium = market.mu() - market.r();
    if w > problem.safe_level() {
        0.0
    } else if w < problem.alpha() * m {
        problem.excess(w) / premium
    } else {
        2.0 * problem.excess(w) / premium
    }
}

/// Drift `b(w) = r w + (μ - r) π - c(w)` and volatility `s(w) = σ π` under
/// the extended optimal amount.
pub fn evaluate_policy(problem: &DrawdownProblem, w: f64, m: f64) -> PolicyEval {
    let market = problem.market();
    let pi = pi_star_extended(problem, w, m);
    PolicyEval {
        pi_star: pi,
        drift_b: (market.mu() - market.r()) * pi - problem.excess(w),
        vol_s: market.sigma() * pi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiBranch {
    /// `m >= w_s`: the maximum never moves and drawdown is ruin at `αm`.
    RuinBranch,
    /// `m < w_s`.
    DrawdownBranch,
    /// On the barrier (value 1) or at the safe level with `m >= w_s` (value 0).
    Boundary,
    /// Infinite safe level with excess bounded away from zero.
    CertainDrawdown,
}

impl PhiBranch {
    pub fn name(&self) -> &'static str {
        match self {
            PhiBranch::RuinBranch => "RuinBranch",
            PhiBranch::DrawdownBranch => "DrawdownBranch",
            PhiBranch::Boundary => "Boundary",
            PhiBranch::CertainDrawdown => "CertainDrawdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiValue {
    pub value: f64,
    pub branch: PhiBranch,
}

/// `w ↦ 1 - coef · g(w, m)` for a fixed `m`: the shape shared by `phi` and
/// `h^N` along a slice of constant maximum.
#[derive(Debug, Clone, Copy)]
pub struct PhiSlice<'a> {
    ctx: &'a ScaleContext,
    m: f64,
    coef: f64,
    branch: PhiBranch,
}

impl<'a> PhiSlice<'a> {
    /// The `phi` slice at maximum `m`. No domain check on `m` beyond `m > 0`.
    pub fn new(ctx: &'a ScaleContext, m: f64) -> Result<Self, PolicyError> {
        if !(m > 0.0) {
            return Err(DomainError::NonPositiveMax { m }.into());
        }
        let (coef, branch) = match ctx.problem().regime() {
            Regime::InfiniteSafeCertainDrawdown { .. } => (0.0, PhiBranch::CertainDrawdown),
            Regime::FiniteSafe { ws } if m >= ws => (1.0 / ctx.g(ws, m)?, PhiBranch::RuinBranch),
            Regime::FiniteSafe { .. } => {
                let g_safe = ctx.g_at_safe_level().ok_or(ScaleError::InfiniteSafeLevel)?;
                (ctx.k(m)? / g_safe, PhiBranch::DrawdownBranch)
            }
            Regime::InfiniteSafeOther => (ctx.drawdown_ratio_limit(m)?, PhiBranch::DrawdownBranch),
        };
        Ok(Self { ctx, m, coef, branch })
    }

    /// The `h^N` slice at maximum `m`.
    pub fn h_n(ctx: &'a ScaleContext, m: f64, n: f64) -> Result<Self, PolicyError> {
        Ok(Self {
            ctx,
            m,
            coef: ctx.h_n_coefficient(m, n)?,
            branch: PhiBranch::DrawdownBranch,
        })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn coefficient(&self) -> f64 {
        self.coef
    }

    pub fn branch(&self) -> PhiBranch {
        self.branch
    }

    /// `1 - coef · g(w, m)` without clamping or domain checks.
    pub fn raw(&self, w: f64) -> Result<f64, PolicyError> {
        if self.coef == 0.0 {
            return Ok(1.0);
        }
        Ok(1.0 - self.coef * self.ctx.g(w, self.m)?)
    }
}

/// Values at `w - h`, `w`, `w + h` and the two increments from the centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub lo: f64,
    pub mid: f64,
    pub hi: f64,
    pub d_minus: f64,
    pub d_plus: f64,
}

/// A function of wealth whose HJB residual can be measured.
pub trait ValueFunction {
    fn value(&self, w: f64) -> Result<f64, PolicyError>;

    /// Three-point stencil. The default subtracts values; implementations
    /// that can compute the increments directly should, since the second
    /// difference is otherwise dominated by rounding for small `h`.
    fn stencil(&self, w: f64, h: f64) -> Result<Stencil, PolicyError> {
        let (lo, mid, hi) = (self.value(w - h)?, self.value(w)?, self.value(w + h)?);
        Ok(Stencil {
            lo,
            mid,
            hi,
            d_minus: lo - mid,
            d_plus: hi - mid,
        })
    }
}

impl ValueFunction for PhiSlice<'_> {
    fn value(&self, w: f64) -> Result<f64, PolicyError> {
        self.raw(w)
    }

    fn stencil(&self, w: f64, h: f64) -> Result<Stencil, PolicyError> {
        let mid = self.raw(w)?;
        if self.coef == 0.0 {
            return Ok(Stencil {
                lo: mid,
                mid,
                hi: mid,
                d_minus: 0.0,
                d_plus: 0.0,
            });
        }
        let d_minus = -self.coef * self.ctx.g_increment(self.m, w, w - h)?;
        let d_plus = -self.coef * self.ctx.g_increment(self.m, w, w + h)?;
        Ok(Stencil {
            lo: mid + d_minus,
            mid,
            hi: mid + d_plus,
            d_minus,
            d_plus,
        })
    }
}

/// Adapts a plain function of wealth, e.g. a candidate solution.
#[derive(Debug, Clone, Copy)]
pub struct Sampled<F>(pub F);

impl<F: Fn(f64) -> f64> ValueFunction for Sampled<F> {
    fn value(&self, w: f64) -> Result<f64, PolicyError> {
        Ok((self.0)(w))
    }
}

/// The minimum probability of drawdown at `(w, m)`.
pub fn phi(ctx: &ScaleContext, w: f64, m: f64) -> Result<PhiValue, PolicyError> {
    ctx.problem().state_point(w, m)?;
    if let Some(v) = phi_at_boundary(ctx, w, m) {
        return Ok(v);
    }
    phi_on_slice(&PhiSlice::new(ctx, m)?, w)
}

/// As [`phi`], reusing a slice built once for its `m`.
pub fn phi_on_slice(slice: &PhiSlice<'_>, w: f64) -> Result<PhiValue, PolicyError> {
    let ctx = slice.ctx;
    ctx.problem().state_point(w, slice.m)?;
    if let Some(v) = phi_at_boundary(ctx, w, slice.m) {
        return Ok(v);
    }
    Ok(PhiValue {
        value: slice.raw(w)?.clamp(0.0, 1.0),
        branch: slice.branch(),
    })
}

fn phi_at_boundary(ctx: &ScaleContext, w: f64, m: f64) -> Option<PhiValue> {
    let problem = ctx.problem();
    if let Regime::InfiniteSafeCertainDrawdown { .. } = problem.regime() {
        return Some(PhiValue {
            value: 1.0,
            branch: PhiBranch::CertainDrawdown,
        });
    }
    let tol = ctx.tol().abs_tol;
    if (w - problem.alpha() * m).abs() <= tol {
        return Some(PhiValue {
            value: 1.0,
            branch: PhiBranch::Boundary,
        });
    }
    let ws = problem.safe_level();
    if m >= ws && (w - ws).abs() <= tol {
        return Some(PhiValue {
            value: 0.0,
            branch: PhiBranch::Boundary,
        });
    }
    None
}

/// The closed-form expression for `phi` evaluated without the domain check,
/// e.g. at `(m, m - h)` for derivatives across the diagonal.
pub fn phi_extended(ctx: &ScaleContext, w: f64, m: f64) -> Result<f64, PolicyError> {
    PhiSlice::new(ctx, m)?.raw(w)
}

/// `∂_m phi(m, m)` by a central difference of step `h` in `m`.
pub fn smooth_pasting(ctx: &ScaleContext, m: f64, h: f64) -> Result<f64, PolicyError> {
    if !(h > 0.0) {
        return Err(PolicyError::InvalidStep(h));
    }
    let up = phi_extended(ctx, m, m + h)?;
    let down = phi_extended(ctx, m, m - h)?;
    Ok((up - down) / (2.0 * h))
}

/// `(r w - c(w)) V_w - δ V_w^2 / V_ww` by central differences of step `h`.
pub fn hjb_residual_of<V: ValueFunction + ?Sized>(
    problem: &DrawdownProblem,
    vf: &V,
    w: f64,
    h: f64,
) -> Result<f64, PolicyError> {
    if !(h > 0.0) {
        return Err(PolicyError::InvalidStep(h));
    }
    let s = vf.stencil(w, h)?;
    let phi_w = (s.d_plus - s.d_minus) / (2.0 * h);
    let phi_ww = (s.d_plus + s.d_minus) / (h * h);
    let floor = 64.0 * f64::EPSILON * (s.lo.abs() + 2.0 * s.mid.abs() + s.hi.abs()) / (h * h);
    if !(phi_ww.abs() > floor) {
        return Err(PolicyError::DegenerateSecondDerivative { w, phi_ww });
    }
    Ok(-problem.excess(w) * phi_w - problem.delta() * phi_w * phi_w / phi_ww)
}

/// HJB residual of `phi` along the slice through `(w, m)`.
pub fn hjb_residual(ctx: &ScaleContext, w: f64, m: f64, h: f64) -> Result<f64, PolicyError> {
    let problem = ctx.problem();
    problem.state_point(w, m)?;
    let (lo, hi) = (w - h, w + h);
    if lo < problem.alpha() * m || hi > problem.safe_level() {
        return Err(PolicyError::StencilOutsideDomain { lo, hi });
    }
    hjb_residual_of(problem, &PhiSlice::new(ctx, m)?, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VerificationFailure {
    OutOfRange { w: f64, value: f64 },
    Increasing { w_lo: f64, w_hi: f64, rise: f64 },
    NotConvex { w: f64, second_difference: f64 },
    SmoothPasting { derivative: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub m: f64,
    /// `(w, phi(w, m))` for the in-domain grid points.
    pub samples: Vec<(f64, f64)>,
    /// `∂_m phi(m, m)`, when the maximum can still move (`m < w_s`).
    pub pasting: Option<f64>,
    pub failures: Vec<VerificationFailure>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Slack allowed for evaluation noise in sampled values of `phi`.
pub const SAMPLE_NOISE: f64 = 1e-8;
/// Largest accepted `|∂_m phi(m, m)|`.
pub const PASTING_TOL: f64 = 1e-4;

/// Range, monotonicity and convexity checks on samples `(w, phi)` sorted by
/// increasing `w`, allowing `noise` in each value.
pub fn check_slice(samples: &[(f64, f64)], noise: f64) -> Vec<VerificationFailure> {
    let mut out = Vec::new();
    for &(w, value) in samples {
        if !(-noise..=1.0 + noise).contains(&value) {
            out.push(VerificationFailure::OutOfRange { w, value });
        }
    }
    for p in samples.windows(2) {
        let rise = p[1].1 - p[0].1;
        if rise > 2.0 * noise {
            out.push(VerificationFailure::Increasing {
                w_lo: p[0].0,
                w_hi: p[1].0,
                rise,
            });
        }
    }
    for t in samples.windows(3) {
        let (h1, h2) = (t[1].0 - t[0].0, t[2].0 - t[1].0);
        let second = 2.0 * ((t[2].1 - t[1].1) / h2 - (t[1].1 - t[0].1) / h1) / (h1 + h2);
        let slack = 4.0 * noise / (h1.min(h2) * h1.min(h2));
        if second < -slack {
            out.push(VerificationFailure::NotConvex {
                w: t[1].0,
                second_difference: second,
            });
        }
    }
    out
}

/// Samples `phi(·, m)` on the in-domain part of `grid` and checks range,
/// monotonicity, convexity and smooth pasting at the diagonal.
pub fn verification_conditions(ctx: &ScaleContext, m: f64, grid: &[f64]) -> Result<VerificationReport, PolicyError> {
    let problem = ctx.problem();
    let mut points: Vec<f64> = grid
        .iter()
        .copied()
        .filter(|&w| problem.state_point(w, m).is_ok())
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut samples = Vec::with_capacity(points.len());
    for w in points {
        samples.push((w, phi(ctx, w, m)?.value));
    }
    let mut failures = check_slice(&samples, SAMPLE_NOISE);
    let ws = problem.safe_level();
    let pasting = if m < ws {
        let width = if ws.is_finite() { ws - problem.alpha() * m } else { m };
        let d = smooth_pasting(ctx, m, 1e-5 * width)?;
        if !(d.abs() <= PASTING_TOL) {
            failures.push(VerificationFailure::SmoothPasting { derivative: d });
        }
        Some(d)
    } else {
        None
    };
    Ok(VerificationReport {
        m,
        samples,
        pasting,
        failures,
    })
}
