//! Generic numerical kernels: adaptive Gauss–Kronrod quadrature, windowed
//! improper integrals with divergence detection, bracketed root finding and
//! central finite differences.
//!
//! Every integrator comes in two flavours. The plain one takes an infallible
//! integrand; the `try_` one threads an error type through so that nested
//! integrals (an integrand that itself integrates) can propagate failures
//! without panicking.

use alloc::vec::Vec;

use thiserror::Error;

/// Error control for the adaptive integrators and the root finder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Tolerance {
    pub fn new(abs_tol: f64, rel_tol: f64, max_subdivisions: usize) -> Result<Self, NumericsError> {
        let tol = Self {
            abs_tol,
            rel_tol,
            max_subdivisions,
        };
        tol.check()?;
        Ok(tol)
    }

    fn check(&self) -> Result<(), NumericsError> {
        let ok = self.abs_tol > 0.0
            && self.abs_tol.is_finite()
            && self.rel_tol > 0.0
            && self.rel_tol.is_finite()
            && self.max_subdivisions >= 1;
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidTolerance)
        }
    }

    /// Accepted absolute error for an estimate of magnitude `value`.
    #[inline]
    pub fn target(&self, value: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * value.abs())
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-9,
            max_subdivisions: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum NumericsError {
    #[error("function is not finite at x = {x} (value {value})")]
    NonFinite { x: f64, value: f64 },
    #[error("subdivision budget exhausted: best estimate {estimate} (error estimate {error})")]
    BudgetExhausted { estimate: f64, error: f64 },
    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    NoSignChange { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("invalid interval [{a}, {b}]")]
    InvalidInterval { a: f64, b: f64 },
    #[error("tolerances must be positive and finite with at least one subdivision")]
    InvalidTolerance,
}

/// Outcome of a definite integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

// 15-point Kronrod abscissae on [-1, 1] (positive half, centre last) with the
// embedded 7-point Gauss rule at the odd indices.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn checked<E, F>(f: &mut F, x: f64) -> Result<f64, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<NumericsError>,
{
    let value = f(x)?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NumericsError::NonFinite { x, value }.into())
    }
}

fn gauss_kronrod<E, F>(f: &mut F, a: f64, b: f64) -> Result<Panel, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<NumericsError>,
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = checked(f, center)?;

    let mut fv1 = [0.0; 7];
    let mut fv2 = [0.0; 7];
    let mut res_k = WGK[7] * fc;
    let mut res_g = WG[3] * fc;
    let mut res_abs = WGK[7] * fc.abs();
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = checked(f, center - dx)?;
        let f2 = checked(f, center + dx)?;
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }

    let mean = 0.5 * res_k;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }

    let scale = half.abs();
    let value = res_k * half;
    res_abs *= scale;
    res_asc *= scale;
    let mut error = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * libm::pow(200.0 * error / res_asc, 1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Ok(Panel { a, b, value, error })
}

/// Adaptive integral of a fallible integrand over `[a, b]`.
///
/// Global bisection of the panel with the largest error estimate until the
/// summed estimate is within `tol.target(|I|)`. The 15-point rule never samples
/// the endpoints, so integrands that are singular exactly at `a` or `b` are fine
/// as long as the integral is finite.
pub fn try_integrate<E, F>(mut f: F, a: f64, b: f64, tol: &Tolerance) -> Result<Quadrature, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<NumericsError>,
{
    tol.check()?;
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(NumericsError::InvalidInterval { a, b }.into());
    }
    if a == b {
        return Ok(Quadrature {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }

    let mut panels: Vec<Panel> = Vec::with_capacity(16);
    panels.push(gauss_kronrod(&mut f, a, b)?);
    let mut evaluations = 15;

    loop {
        let (value, error) = panels
            .iter()
            .fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.error));
        if error <= tol.target(value) {
            return Ok(Quadrature {
                value,
                error,
                evaluations,
            });
        }
        if panels.len() >= tol.max_subdivisions {
            return Err(NumericsError::BudgetExhausted {
                estimate: value,
                error,
            }
            .into());
        }

        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let panel = panels[worst];
        let mid = 0.5 * (panel.a + panel.b);
        if !(mid > panel.a && mid < panel.b) {
            // Panel is down to adjacent floats; the estimate cannot improve.
            return Err(NumericsError::BudgetExhausted {
                estimate: value,
                error,
            }
            .into());
        }
        panels[worst] = gauss_kronrod(&mut f, panel.a, mid)?;
        panels.push(gauss_kronrod(&mut f, mid, panel.b)?);
        evaluations += 30;
    }
}

/// End of an interval that carries a boundary layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Start,
    End,
}

/// [`try_integrate`] with `[a, b]` cut at distances `s, 2s, 4s, ...` from the
/// layered end, so a feature of width `s` there is seen by the first rule
/// instead of slipping between its nodes.
pub fn try_integrate_graded<E, F>(
    mut f: F,
    a: f64,
    b: f64,
    layer: Layer,
    s: f64,
    tol: &Tolerance,
) -> Result<Quadrature, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<NumericsError>,
{
    let width = b - a;
    if !(s > 0.0 && s < width / 8.0 && width.is_finite()) {
        return try_integrate(f, a, b, tol);
    }
    let mut cuts = Vec::new();
    let mut d = s;
    while d < width {
        cuts.push(match layer {
            Layer::Start => a + d,
            Layer::End => b - d,
        });
        d *= 2.0;
    }
    if layer == Layer::End {
        cuts.reverse();
    }
    let mut total = Quadrature {
        value: 0.0,
        error: 0.0,
        evaluations: 0,
    };
    let mut lo = a;
    for hi in cuts.into_iter().chain(core::iter::once(b)) {
        if hi <= lo {
            continue;
        }
        let q = try_integrate(&mut f, lo, hi, tol)?;
        total.value += q.value;
        total.error += q.error;
        total.evaluations += q.evaluations;
        lo = hi;
    }
    Ok(total)
}

/// Adaptive integral of `f` over `[a, b]`; see [`try_integrate`].
pub fn integrate<F>(mut f: F, a: f64, b: f64, tol: &Tolerance) -> Result<f64, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    try_integrate(|x| Ok::<f64, NumericsError>(f(x)), a, b, tol).map(|q| q.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    PlusInfinity,
    MinusInfinity,
}

/// Outcome of an integral over `[a, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImproperResult {
    Converged {
        value: f64,
        est_error: f64,
    },
    Divergent(Direction),
    Inconclusive {
        partial: f64,
        last_increment: f64,
        /// Upper end of the last window that was integrated.
        truncation_point: f64,
    },
}

/// Windowing and divergence heuristics for [`integrate_to_infinity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImproperConfig {
    /// Width of the first window.
    pub window: f64,
    /// Each window is this many times wider than the previous one.
    pub growth: f64,
    /// `|partial|` beyond which monotone increments are declared divergent.
    pub blow_up: f64,
    pub max_windows: usize,
}

impl ImproperConfig {
    pub fn new(window: f64) -> Self {
        Self {
            window,
            growth: 2.0,
            blow_up: 1e10,
            max_windows: 900,
        }
    }

    pub fn with_blow_up(mut self, blow_up: f64) -> Self {
        self.blow_up = blow_up;
        self
    }
}

/// Accumulates `∫_a^∞ f` over successive windows.
///
/// Converged once two successive increments are below `abs_tol` and not
/// growing; divergent once the partial sum passes `blow_up` in magnitude while
/// the increments keep the same monotone trend; otherwise inconclusive when the
/// window budget (or the floating-point range) runs out.
pub fn try_integrate_to_infinity<E, F>(
    mut f: F,
    a: f64,
    tol: &Tolerance,
    config: &ImproperConfig,
) -> Result<ImproperResult, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<NumericsError>,
{
    if !(config.window > 0.0 && config.window.is_finite() && config.growth >= 1.0) {
        return Err(NumericsError::InvalidInterval {
            a,
            b: f64::INFINITY,
        }
        .into());
    }
    let mut lo = a;
    let mut width = config.window;
    let mut partial = 0.0;
    let mut err_sum = 0.0;
    let mut previous: Option<f64> = None;
    let mut small_run = 0usize;

    for _ in 0..config.max_windows {
        let hi = lo + width;
        if !hi.is_finite() {
            break;
        }
        let q = try_integrate(&mut f, lo, hi, tol)?;
        let increment = q.value;
        partial += increment;
        err_sum += q.error;

        let shrinking = previous.is_none_or(|p| increment.abs() <= p.abs());
        if increment.abs() < tol.abs_tol && shrinking {
            small_run += 1;
            if small_run >= 2 {
                return Ok(ImproperResult::Converged {
                    value: partial,
                    est_error: err_sum + increment.abs(),
                });
            }
        } else {
            small_run = 0;
        }

        if let Some(p) = previous {
            let slack = tol.target(p);
            if partial > config.blow_up && increment >= p - slack {
                return Ok(ImproperResult::Divergent(Direction::PlusInfinity));
            }
            if partial < -config.blow_up && increment <= p + slack {
                return Ok(ImproperResult::Divergent(Direction::MinusInfinity));
            }
        }

        previous = Some(increment);
        lo = hi;
        width *= config.growth;
    }

    Ok(ImproperResult::Inconclusive {
        partial,
        last_increment: previous.unwrap_or(0.0),
        truncation_point: lo,
    })
}

/// Infallible-integrand form of [`try_integrate_to_infinity`].
pub fn integrate_to_infinity<F>(
    mut f: F,
    a: f64,
    tol: &Tolerance,
    config: &ImproperConfig,
) -> Result<ImproperResult, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    try_integrate_to_infinity(|x| Ok::<f64, NumericsError>(f(x)), a, tol, config)
}

/// Final bracket of a root search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootBracket {
    pub lo: f64,
    pub hi: f64,
    /// Bracket end (or exact zero) with the smallest `|f|`.
    pub root: f64,
}

/// Shrinks a sign-changing bracket to width `≤ tol.abs_tol`, alternating
/// secant and bisection steps so the width at least halves every two
/// iterations.
pub fn bracket_root<F>(mut f: F, lo: f64, hi: f64, tol: &Tolerance) -> Result<RootBracket, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    tol.check()?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(NumericsError::InvalidInterval { a: lo, b: hi });
    }
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite { x, value: v })
        }
    };
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (eval(a)?, eval(b)?);
    if fa == 0.0 {
        return Ok(RootBracket { lo: a, hi: a, root: a });
    }
    if fb == 0.0 {
        return Ok(RootBracket { lo: b, hi: b, root: b });
    }
    if fa.signum() == fb.signum() {
        return Err(NumericsError::NoSignChange {
            lo,
            hi,
            f_lo: fa,
            f_hi: fb,
        });
    }

    let mut use_secant = true;
    while b - a > tol.abs_tol {
        let mid = 0.5 * (a + b);
        if !(mid > a && mid < b) {
            break;
        }
        let mut x = mid;
        if use_secant {
            let s = a - fa * (b - a) / (fb - fa);
            if s > a && s < b {
                x = s;
            }
        }
        use_secant = !use_secant;

        let fx = eval(x)?;
        if fx == 0.0 {
            return Ok(RootBracket { lo: x, hi: x, root: x });
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
    }
    let root = if fa.abs() <= fb.abs() { a } else { b };
    Ok(RootBracket { lo: a, hi: b, root })
}

/// Root of `f` in `[lo, hi]`; requires `f(lo)` and `f(hi)` of opposite sign.
pub fn find_root<F>(f: F, lo: f64, hi: f64, tol: &Tolerance) -> Result<f64, NumericsError>
where
    F: FnMut(f64) -> f64,
{
    bracket_root(f, lo, hi, tol).map(|b| b.root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOrder {
    First,
    Second,
}

/// Central difference of the requested order with step `h`.
pub fn finite_diff<F>(mut f: F, x: f64, h: f64, order: DiffOrder) -> f64
where
    F: FnMut(f64) -> f64,
{
    match order {
        DiffOrder::First => (f(x + h) - f(x - h)) / (2.0 * h),
        DiffOrder::Second => (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h),
    }
}
