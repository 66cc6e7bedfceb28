//! Market parameters, payout functions, the safe level and regime
//! classification.

use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::numerics::{self, Tolerance};

/// Smallest wealth sampled when scanning a payout for violations or crossings.
pub const W_MIN_SEARCH: f64 = 1e-6;
/// Largest wealth searched for a crossing `c(w) = r w`; beyond it the regime
/// scan takes over.
pub const W_MAX_SEARCH: f64 = 1e6;
/// Grid used by [`DrawdownProblem::new`] when validating the payout.
pub const DEFAULT_VALIDATION_GRID: usize = 512;
const SAFE_LEVEL_GRID: usize = 4096;

/// Boundary tie slack at wealth scale `x`.
#[inline]
pub(crate) fn tie(x: f64) -> f64 {
    1e-10 * x.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid market: {0}")]
    InvalidMarket(&'static str),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("invalid payout table: {0}")]
    InvalidTable(&'static str),
    #[error("payout violates the model assumptions: {}", ViolationList(.0))]
    InvalidPayout(Vec<Violation>),
    #[error("c(w) - r w changes sign {0} times; the safe level is not unique")]
    AmbiguousCrossing(usize),
    #[error("c(w) <= r w near zero wealth; there is no positive safe level")]
    NoSafeLevel,
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Riskless rate `r`, drift `mu` and volatility `sigma` of the risky asset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    r: f64,
    mu: f64,
    sigma: f64,
}

impl MarketParams {
    pub fn new(r: f64, mu: f64, sigma: f64) -> Result<Self, ModelError> {
        if !(r.is_finite() && mu.is_finite() && sigma.is_finite()) {
            return Err(ModelError::InvalidMarket("parameters must be finite"));
        }
        if r <= 0.0 {
            return Err(ModelError::InvalidMarket("r must be positive"));
        }
        if mu <= r {
            return Err(ModelError::InvalidMarket("mu must exceed r"));
        }
        if sigma <= 0.0 {
            return Err(ModelError::InvalidMarket("sigma must be positive"));
        }
        Ok(Self { r, mu, sigma })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Half the squared Sharpe ratio, `((mu - r) / sigma)^2 / 2`.
    pub fn delta(&self) -> f64 {
        let sharpe = (self.mu - self.r) / self.sigma;
        0.5 * sharpe * sharpe
    }
}

/// Piecewise-linear payout through sorted knots, held constant outside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tabulated {
    knots: Vec<(f64, f64)>,
}

impl Tabulated {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        if knots.len() < 2 {
            return Err(ModelError::InvalidTable("need at least two knots"));
        }
        if knots.iter().any(|(w, c)| !(w.is_finite() && c.is_finite())) {
            return Err(ModelError::InvalidTable("knots must be finite"));
        }
        if knots.windows(2).any(|k| k[1].0 <= k[0].0) {
            return Err(ModelError::InvalidTable("knot wealths must be strictly increasing"));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn rate(&self, w: f64) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if w <= first.0 {
            return first.1;
        }
        if w >= last.0 {
            return last.1;
        }
        let i = self.knots.partition_point(|k| k.0 <= w);
        let (w0, c0) = self.knots[i - 1];
        let (w1, c1) = self.knots[i];
        c0 + (c1 - c0) * (w - w0) / (w1 - w0)
    }
}

/// Payout rate `c(w)` of the fund.
#[derive(Debug, Clone, PartialEq)]
pub enum PayoutSpec {
    Constant { c: f64 },
    Proportional { kappa: f64 },
    /// `c(w) = a + b w`.
    Affine { a: f64, b: f64 },
    /// `c(w) = r w + b (ws - w)^2` on `[ws - r/(2b), ws]`, held at `r ws`
    /// above `ws` and at its left-end value below the monotone range.
    QuadraticSafe { b: f64, ws: f64 },
    Tabulated(Tabulated),
}

impl PayoutSpec {
    /// `c(w)`; negative wealth uses `c(0)`.
    pub fn rate(&self, w: f64, market: &MarketParams) -> f64 {
        let w = w.max(0.0);
        match self {
            PayoutSpec::Constant { c } => *c,
            PayoutSpec::Proportional { kappa } => kappa * w,
            PayoutSpec::Affine { a, b } => a + b * w,
            PayoutSpec::QuadraticSafe { b, ws } => {
                let r = market.r();
                let w = w.clamp(ws - r / (2.0 * b), *ws);
                r * w + b * (ws - w) * (ws - w)
            }
            PayoutSpec::Tabulated(t) => t.rate(w),
        }
    }

    /// Lowest `alpha * m` for which the quadratic payout is non-decreasing
    /// on the drawdown domain. `None` for the other payouts.
    pub fn quadratic_guard(&self, market: &MarketParams) -> Option<f64> {
        match self {
            PayoutSpec::QuadraticSafe { b, ws } => Some(ws - market.r() / (2.0 * b)),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PayoutSpec::Constant { .. } => "constant",
            PayoutSpec::Proportional { .. } => "proportional",
            PayoutSpec::Affine { .. } => "affine",
            PayoutSpec::QuadraticSafe { .. } => "quadratic_safe",
            PayoutSpec::Tabulated(_) => "tabulated",
        }
    }
}

/// `c(w) - r w`.
#[inline]
pub fn excess(payout: &PayoutSpec, market: &MarketParams, w: f64) -> f64 {
    let r = market.r();
    // Closed forms avoid the cancellation in c(w) - r w.
    match *payout {
        PayoutSpec::Constant { c } => c - r * w,
        PayoutSpec::Proportional { kappa } if w >= 0.0 => (kappa - r) * w,
        PayoutSpec::Affine { a, b } if w >= 0.0 => a + (b - r) * w,
        PayoutSpec::QuadraticSafe { b, ws } if w >= ws - r / (2.0 * b) => {
            if w <= ws {
                b * (ws - w) * (ws - w)
            } else {
                r * (ws - w)
            }
        }
        _ => payout.rate(w, market) - r * w,
    }
}

/// A structured reason why a payout falls outside the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    InvalidParameter { name: &'static str, value: f64 },
    Negative { w: f64, c: f64 },
    Decreasing { w_lo: f64, w_hi: f64, c_lo: f64, c_hi: f64 },
    /// `c(w) <= r w` already at the smallest wealth sampled.
    NoPositiveExcess { w: f64 },
    /// `c(w) - r w` turns from non-positive to positive.
    UpwardCrossing { w: f64 },
    MultipleCrossings { count: usize },
    GridTooSmall { grid_size: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidParameter { name, value } => write!(f, "parameter {name} = {value} out of range"),
            Violation::Negative { w, c } => write!(f, "negative payout c({w}) = {c}"),
            Violation::Decreasing { w_lo, w_hi, c_lo, c_hi } => {
                write!(f, "payout decreases: c({w_lo}) = {c_lo} > c({w_hi}) = {c_hi}")
            }
            Violation::NoPositiveExcess { w } => write!(f, "c(w) <= r w already at w = {w}"),
            Violation::UpwardCrossing { w } => write!(f, "c(w) - r w turns positive near w = {w}"),
            Violation::MultipleCrossings { count } => write!(f, "c(w) - r w changes sign {count} times"),
            Violation::GridTooSmall { grid_size } => write!(f, "validation grid of {grid_size} points is below 16"),
        }
    }
}

fn geometric_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let ratio = hi / lo;
    let last = (n - 1) as f64;
    (0..n).map(move |i| {
        if i + 1 == n {
            hi
        } else {
            lo * libm::pow(ratio, i as f64 / last)
        }
    })
}

fn excess_sign(payout: &PayoutSpec, market: &MarketParams, w: f64) -> i8 {
    let e = excess(payout, market, w);
    let scale = payout.rate(w, market).abs().max(market.r() * w);
    if e.abs() <= 1e-14 * scale {
        0
    } else if e > 0.0 {
        1
    } else {
        -1
    }
}

/// Sign transitions of `c(w) - r w` on the grid, as `(w_before, w_after, upward)`.
fn crossings(payout: &PayoutSpec, market: &MarketParams, grid_size: usize) -> (Option<(f64, i8)>, Vec<(f64, f64, bool)>) {
    let mut first: Option<(f64, i8)> = None;
    let mut last: Option<(f64, i8)> = None;
    let mut out = Vec::new();
    for w in geometric_grid(W_MIN_SEARCH, W_MAX_SEARCH, grid_size) {
        let s = excess_sign(payout, market, w);
        if s == 0 {
            continue;
        }
        if first.is_none() {
            first = Some((w, s));
        }
        if let Some((w_prev, s_prev)) = last {
            if s != s_prev {
                out.push((w_prev, w, s > 0));
            }
        }
        last = Some((w, s));
    }
    (first, out)
}

/// Checks a payout against the model assumptions on a geometric grid of
/// `grid_size` points in `[W_MIN_SEARCH, W_MAX_SEARCH]`. An empty list means
/// the payout is admissible.
pub fn validate(payout: &PayoutSpec, market: &MarketParams, grid_size: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if grid_size < 16 {
        out.push(Violation::GridTooSmall { grid_size });
        return out;
    }

    let bad = |name, value: f64, ok: bool, out: &mut Vec<Violation>| {
        if !ok || !value.is_finite() {
            out.push(Violation::InvalidParameter { name, value });
        }
    };
    match payout {
        PayoutSpec::Constant { c } => bad("c", *c, *c >= 0.0, &mut out),
        PayoutSpec::Proportional { kappa } => bad("kappa", *kappa, *kappa >= 0.0, &mut out),
        PayoutSpec::Affine { a, b } => {
            bad("a", *a, *a >= 0.0, &mut out);
            bad("b", *b, *b >= 0.0, &mut out);
        }
        PayoutSpec::QuadraticSafe { b, ws } => {
            bad("b", *b, *b > 0.0, &mut out);
            bad("ws", *ws, *ws > 0.0, &mut out);
        }
        PayoutSpec::Tabulated(t) => {
            for k in t.knots().windows(2) {
                if k[1].1 < k[0].1 {
                    out.push(Violation::Decreasing {
                        w_lo: k[0].0,
                        w_hi: k[1].0,
                        c_lo: k[0].1,
                        c_hi: k[1].1,
                    });
                }
            }
        }
    }
    if !out.is_empty() {
        return out;
    }

    let mut previous: Option<(f64, f64)> = None;
    for w in geometric_grid(W_MIN_SEARCH, W_MAX_SEARCH, grid_size) {
        let c = payout.rate(w, market);
        if c < 0.0 {
            out.push(Violation::Negative { w, c });
        }
        if let Some((w_lo, c_lo)) = previous {
            let slack = Tolerance::default().abs_tol * c_lo.abs().max(1.0);
            if c < c_lo - slack {
                let already = matches!(out.last(), Some(Violation::Decreasing { .. }));
                if !already {
                    out.push(Violation::Decreasing {
                        w_lo,
                        w_hi: w,
                        c_lo,
                        c_hi: c,
                    });
                }
            }
        }
        previous = Some((w, c));
    }

    let (first, changes) = crossings(payout, market, grid_size);
    match first {
        Some((_, s)) if s > 0 => {}
        _ => out.push(Violation::NoPositiveExcess { w: W_MIN_SEARCH }),
    }
    if changes.len() > 1 {
        out.push(Violation::MultipleCrossings { count: changes.len() });
    }
    for &(_, w, upward) in &changes {
        if upward {
            out.push(Violation::UpwardCrossing { w });
        }
    }
    out
}

/// The safe level found purely numerically: sign scan on a geometric grid
/// followed by a bracketed root solve. `+∞` when `c(w) > r w` on the whole
/// search range.
pub fn safe_level_scan(payout: &PayoutSpec, market: &MarketParams, grid_size: usize) -> Result<f64, ModelError> {
    let (first, changes) = crossings(payout, market, grid_size.max(16));
    match first {
        Some((_, s)) if s > 0 => {}
        _ => return Err(ModelError::NoSafeLevel),
    }
    match changes.as_slice() {
        [] => Ok(f64::INFINITY),
        [(lo, hi, false)] => {
            let tol = Tolerance::new(1e-13 * hi.max(1.0), 1e-13, 1).expect("valid root tolerance");
            numerics::find_root(|w| excess(payout, market, w), *lo, *hi, &tol).map_err(|_| ModelError::NoSafeLevel)
        }
        [(_, _, true)] => Err(ModelError::NoSafeLevel),
        many => Err(ModelError::AmbiguousCrossing(many.len())),
    }
}

/// The unique `w_s` with `c(w_s) = r w_s`, or `+∞`.
pub fn safe_level(payout: &PayoutSpec, market: &MarketParams) -> Result<f64, ModelError> {
    let r = market.r();
    match *payout {
        PayoutSpec::Constant { c } if c > 0.0 => Ok(c / r),
        PayoutSpec::Proportional { kappa } if kappa > r => Ok(f64::INFINITY),
        PayoutSpec::Affine { a, b } if b > r || (b == r && a > 0.0) => Ok(f64::INFINITY),
        PayoutSpec::Affine { a, b } if a > 0.0 && b < r => Ok(a / (r - b)),
        PayoutSpec::QuadraticSafe { b, ws } if b > 0.0 && ws > 0.0 => Ok(ws),
        PayoutSpec::Tabulated(_) => safe_level_scan(payout, market, SAFE_LEVEL_GRID),
        _ => Err(ModelError::NoSafeLevel),
    }
}

/// Which closed-form branch of the value function applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    FiniteSafe { ws: f64 },
    /// `w_s = ∞` with `c(w) - r w > excess_floor` for every `w > w0`:
    /// drawdown is certain.
    InfiniteSafeCertainDrawdown { excess_floor: f64, w0: f64 },
    InfiniteSafeOther,
}

impl Regime {
    pub fn safe_level(&self) -> f64 {
        match self {
            Regime::FiniteSafe { ws } => *ws,
            _ => f64::INFINITY,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::FiniteSafe { .. } => "FiniteSafe",
            Regime::InfiniteSafeCertainDrawdown { .. } => "InfiniteSafeCertainDrawdown",
            Regime::InfiniteSafeOther => "InfiniteSafeOther",
        }
    }
}

pub fn classify_regime(payout: &PayoutSpec, market: &MarketParams) -> Result<Regime, ModelError> {
    let ws = safe_level(payout, market)?;
    if ws.is_finite() {
        return Ok(Regime::FiniteSafe { ws });
    }

    // Expanding scan past the crossing search range.
    let points: Vec<(f64, f64)> = (0..=40)
        .map(|j| {
            let w = W_MAX_SEARCH * libm::ldexp(1.0, j);
            (w, excess(payout, market, w))
        })
        .collect();
    let n = points.len();

    // Witness 1: excess positive and non-decreasing over a tail of the scan.
    let mut start = n - 1;
    while start > 0 && points[start - 1].1 <= points[start].1 && points[start - 1].1 > 0.0 {
        start -= 1;
    }
    if n - start >= 3 && points[start].1 > 0.0 {
        return Ok(Regime::InfiniteSafeCertainDrawdown {
            excess_floor: 0.5 * points[start].1,
            w0: points[start].0,
        });
    }

    // Witness 2: decreasing excess whose geometric extrapolation stays positive.
    let (e1, e2, e3) = (points[n - 3].1, points[n - 2].1, points[n - 1].1);
    let (d1, d2) = (e1 - e2, e2 - e3);
    if e3 > 0.0 && d1 > 0.0 && d2 > 0.0 && d2 < d1 {
        let q = d2 / d1;
        let limit = e3 - d2 * q / (1.0 - q);
        if limit > 0.0 {
            return Ok(Regime::InfiniteSafeCertainDrawdown {
                excess_floor: 0.5 * limit,
                w0: points[n - 1].0,
            });
        }
    }
    Ok(Regime::InfiniteSafeOther)
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DomainError {
    #[error("running maximum m = {m} must be positive")]
    NonPositiveMax { m: f64 },
    #[error("wealth w = {w} is below the drawdown barrier alpha*m = {barrier}")]
    BelowBarrier { w: f64, barrier: f64 },
    #[error("wealth w = {w} exceeds the running maximum m = {m}")]
    AboveMax { w: f64, m: f64 },
    #[error("wealth w = {w} exceeds the safe level w_s = {ws}")]
    AboveSafeLevel { w: f64, ws: f64 },
    #[error("quadratic payout needs alpha*m = {alpha_m} >= w_s - r/(2b) = {guard}")]
    QuadraticGuard { alpha_m: f64, guard: f64 },
    #[error("non-finite state ({w}, {m})")]
    NonFinite { w: f64, m: f64 },
}

/// `(w, m)` inside the domain `alpha m <= w <= min(m, w_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePoint {
    w: f64,
    m: f64,
}

impl StatePoint {
    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn m(&self) -> f64 {
        self.m
    }
}

/// Market, payout and drawdown fraction, validated, with the derived regime.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawdownProblem {
    market: MarketParams,
    payout: PayoutSpec,
    alpha: f64,
    regime: Regime,
}

impl DrawdownProblem {
    pub fn new(market: MarketParams, payout: PayoutSpec, alpha: f64) -> Result<Self, ModelError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ModelError::InvalidAlpha(alpha));
        }
        let violations = validate(&payout, &market, DEFAULT_VALIDATION_GRID);
        if !violations.is_empty() {
            return Err(ModelError::InvalidPayout(violations));
        }
        let regime = classify_regime(&payout, &market)?;
        Ok(Self {
            market,
            payout,
            alpha,
            regime,
        })
    }

    pub fn market(&self) -> &MarketParams {
        &self.market
    }

    pub fn payout(&self) -> &PayoutSpec {
        &self.payout
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn delta(&self) -> f64 {
        self.market.delta()
    }

    /// `w_s`, `+∞` when there is no finite safe level.
    pub fn safe_level(&self) -> f64 {
        self.regime.safe_level()
    }

    #[inline]
    pub fn payout_rate(&self, w: f64) -> f64 {
        self.payout.rate(w, &self.market)
    }

    #[inline]
    pub fn excess(&self, w: f64) -> f64 {
        excess(&self.payout, &self.market, w)
    }

    /// Same problem with a different drawdown fraction.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, ModelError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ModelError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha, ..self.clone() })
    }

    pub fn state_point(&self, w: f64, m: f64) -> Result<StatePoint, DomainError> {
        if !(w.is_finite() && m.is_finite()) {
            return Err(DomainError::NonFinite { w, m });
        }
        if m <= 0.0 {
            return Err(DomainError::NonPositiveMax { m });
        }
        let barrier = self.alpha * m;
        if w < barrier - tie(barrier) {
            return Err(DomainError::BelowBarrier { w, barrier });
        }
        if w > m + tie(m) {
            return Err(DomainError::AboveMax { w, m });
        }
        let ws = self.safe_level();
        if w > ws + tie(ws) {
            return Err(DomainError::AboveSafeLevel { w, ws });
        }
        if let Some(guard) = self.payout.quadratic_guard(&self.market) {
            if barrier < guard - tie(guard) {
                return Err(DomainError::QuadraticGuard { alpha_m: barrier, guard });
            }
        }
        Ok(StatePoint { w, m })
    }
}
