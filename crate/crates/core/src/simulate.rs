//! Euler–Maruyama simulation of the wealth process under a feedback strategy.
//!
//! Every path draws its normals from a counter-based stream keyed by
//! `(seed, path_index, step)`, so a path's result does not depend on which
//! worker ran it, and different strategies see the same Brownian increments
//! path by path.

use alloc::vec::Vec;

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::math;
use crate::model::{tie, DomainError, DrawdownProblem};
use crate::policy::pi_star_extended;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(&'static str),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Feedback rule for the amount held in the risky asset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// The extended optimal amount.
    Optimal,
    ConstantAmount { pi: f64 },
    /// `π = θ w`.
    ConstantFraction { theta: f64 },
    AllSafe,
}

impl Strategy {
    pub fn amount(&self, problem: &DrawdownProblem, w: f64, m: f64) -> f64 {
        match *self {
            Strategy::Optimal => pi_star_extended(problem, w, m),
            Strategy::ConstantAmount { pi } => pi,
            Strategy::ConstantFraction { theta } => theta * w,
            Strategy::AllSafe => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Optimal => "optimal",
            Strategy::ConstantAmount { .. } => "constant_amount",
            Strategy::ConstantFraction { .. } => "constant_fraction",
            Strategy::AllSafe => "all_safe",
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match *self {
            Strategy::ConstantAmount { pi } if !pi.is_finite() => Err(SimError::InvalidStrategy("amount must be finite")),
            Strategy::ConstantFraction { theta } if !(theta >= 0.0 && theta.is_finite()) => {
                Err(SimError::InvalidStrategy("fraction must be finite and non-negative"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: u64,
    pub seed: u64,
    /// Width of the absorbing band below `w_s`; `None` picks
    /// [`SimConfig::DEFAULT_SAFE_BAND`] of the initial domain width.
    pub eps_safe: Option<f64>,
    /// A path draws down once `W <= α M + eps_barrier`.
    pub eps_barrier: f64,
}

impl SimConfig {
    pub const DEFAULT_SAFE_BAND: f64 = 0.1;

    pub fn new(dt: f64, horizon: f64, n_paths: u64, seed: u64) -> Result<Self, SimError> {
        let c = Self {
            dt,
            horizon,
            n_paths,
            seed,
            eps_safe: None,
            eps_barrier: 0.0,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig("dt must be positive"));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig("horizon must be at least dt"));
        }
        if self.n_paths == 0 {
            return Err(SimError::InvalidConfig("n_paths must be at least 1"));
        }
        if let Some(e) = self.eps_safe {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(SimError::InvalidConfig("eps_safe must be non-negative"));
            }
        }
        if !(self.eps_barrier >= 0.0 && self.eps_barrier.is_finite()) {
            return Err(SimError::InvalidConfig("eps_barrier must be non-negative"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> u64 {
        let n = self.horizon / self.dt;
        let rounded = math::round(n);
        if (n - rounded).abs() <= 1e-9 * n {
            rounded as u64
        } else {
            math::ceil(n) as u64
        }
    }

    /// Absorption band for a path started with maximum `m0`.
    pub fn safe_band(&self, problem: &DrawdownProblem, m0: f64) -> f64 {
        self.eps_safe.unwrap_or_else(|| {
            let ws = problem.safe_level();
            if ws.is_finite() {
                Self::DEFAULT_SAFE_BAND * (ws - problem.alpha() * m0).max(0.0)
            } else {
                0.0
            }
        })
    }
}

/// One Euler–Maruyama step of `dW = (rW + (μ - r)π - c(W)) dt + σπ dB`,
/// with the running maximum updated afterwards.
#[inline]
pub fn step(problem: &DrawdownProblem, strategy: &Strategy, w: f64, m: f64, dt: f64, z: f64) -> (f64, f64) {
    let market = problem.market();
    let pi = strategy.amount(problem, w, m);
    let drift = market.r() * w + (market.mu() - market.r()) * pi - problem.payout_rate(w);
    let next = w + drift * dt + market.sigma() * pi * math::sqrt(dt) * z;
    (next, m.max(next))
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 generator; used for the draws of a single step.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self { state: key }
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Normal draws for one path, addressable by step number.
#[derive(Debug, Clone, Copy)]
pub struct PathStream {
    key: u64,
}

impl PathStream {
    pub fn new(seed: u64, path_index: u64) -> Self {
        Self {
            key: mix(mix(seed) ^ path_index.wrapping_mul(GOLDEN)),
        }
    }

    #[inline]
    pub fn normal(&self, step: u64) -> f64 {
        let mut rng = CounterRng::new(mix(self.key.wrapping_add(step.wrapping_mul(GOLDEN))));
        StandardNormal.sample(&mut rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathOutcome {
    /// `W <= α M` after `steps` steps.
    Drawdown { steps: u64 },
    /// Entered the band below `w_s` after `steps` steps.
    SafeAbsorbed { steps: u64 },
    Censored,
}

/// Checks a starting state. Starting above `w_s` is allowed (the path is
/// absorbed at once); the other constraints of the domain apply.
pub fn check_start(problem: &DrawdownProblem, w0: f64, m0: f64) -> Result<(), SimError> {
    match problem.state_point(w0, m0) {
        Ok(_) | Err(DomainError::AboveSafeLevel { .. }) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

/// Runs path `path_index` from `(w0, m0)`.
pub fn simulate_path(
    problem: &DrawdownProblem,
    strategy: &Strategy,
    w0: f64,
    m0: f64,
    config: &SimConfig,
    path_index: u64,
) -> PathOutcome {
    let alpha = problem.alpha();
    let absorb_at = problem.safe_level() - config.safe_band(problem, m0);
    let (mut w, mut m) = (w0, m0.max(w0));
    let start_barrier = alpha * m;
    if w <= start_barrier + config.eps_barrier + tie(start_barrier) {
        return PathOutcome::Drawdown { steps: 0 };
    }
    if w >= absorb_at {
        return PathOutcome::SafeAbsorbed { steps: 0 };
    }
    let stream = PathStream::new(config.seed, path_index);
    let dt = config.dt;
    for j in 0..config.n_steps() {
        let z = stream.normal(j);
        (w, m) = step(problem, strategy, w, m, dt, z);
        if w <= alpha * m + config.eps_barrier {
            return PathOutcome::Drawdown { steps: j + 1 };
        }
        if w >= absorb_at {
            return PathOutcome::SafeAbsorbed { steps: j + 1 };
        }
    }
    PathOutcome::Censored
}

/// Running counts of path outcomes. Hit times are summed in whole steps so
/// merging tallies in any order gives identical results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub n_paths: u64,
    pub n_drawdown: u64,
    pub n_safe_absorbed: u64,
    pub n_censored: u64,
    pub drawdown_steps: u128,
}

impl Tally {
    pub fn add(&mut self, outcome: PathOutcome) {
        self.n_paths += 1;
        match outcome {
            PathOutcome::Drawdown { steps } => {
                self.n_drawdown += 1;
                self.drawdown_steps += steps as u128;
            }
            PathOutcome::SafeAbsorbed { .. } => self.n_safe_absorbed += 1,
            PathOutcome::Censored => self.n_censored += 1,
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.n_paths += other.n_paths;
        self.n_drawdown += other.n_drawdown;
        self.n_safe_absorbed += other.n_safe_absorbed;
        self.n_censored += other.n_censored;
        self.drawdown_steps += other.drawdown_steps;
    }

    pub fn estimate(&self, dt: f64) -> SimEstimate {
        let n = self.n_paths as f64;
        let p = self.n_drawdown as f64 / n;
        let mean_hit_time = if self.n_drawdown == 0 {
            f64::NAN
        } else {
            self.drawdown_steps as f64 * dt / self.n_drawdown as f64
        };
        SimEstimate {
            p_drawdown: p,
            stderr: math::sqrt(p * (1.0 - p) / n),
            n_paths: self.n_paths,
            n_drawdown: self.n_drawdown,
            n_safe_absorbed: self.n_safe_absorbed,
            n_censored: self.n_censored,
            mean_hit_time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEstimate {
    pub p_drawdown: f64,
    pub stderr: f64,
    pub n_paths: u64,
    pub n_drawdown: u64,
    pub n_safe_absorbed: u64,
    pub n_censored: u64,
    /// Mean time to drawdown among paths that drew down; NaN if none did.
    pub mean_hit_time: f64,
}

impl SimEstimate {
    pub fn from_outcomes<I: IntoIterator<Item = PathOutcome>>(outcomes: I, dt: f64) -> Self {
        let mut t = Tally::default();
        for o in outcomes {
            t.add(o);
        }
        t.estimate(dt)
    }

    pub fn censored_fraction(&self) -> f64 {
        self.n_censored as f64 / self.n_paths as f64
    }
}

/// Simulates paths `range` and tallies them; the building block for running
/// disjoint index ranges on separate workers.
pub fn tally_paths(
    problem: &DrawdownProblem,
    strategy: &Strategy,
    w0: f64,
    m0: f64,
    config: &SimConfig,
    range: core::ops::Range<u64>,
) -> Tally {
    let mut t = Tally::default();
    for i in range {
        t.add(simulate_path(problem, strategy, w0, m0, config, i));
    }
    t
}

/// Monte Carlo estimate of the probability of drawdown from `(w0, m0)`.
pub fn estimate_drawdown(
    problem: &DrawdownProblem,
    strategy: &Strategy,
    w0: f64,
    m0: f64,
    config: &SimConfig,
) -> Result<SimEstimate, SimError> {
    config.validate()?;
    strategy.validate()?;
    check_start(problem, w0, m0)?;
    Ok(tally_paths(problem, strategy, w0, m0, config, 0..config.n_paths).estimate(config.dt))
}

/// Estimates for several strategies on common random numbers: path `i` of
/// every strategy uses the same normal at each step.
pub fn compare_strategies(
    problem: &DrawdownProblem,
    strategies: &[Strategy],
    w0: f64,
    m0: f64,
    config: &SimConfig,
) -> Result<Vec<SimEstimate>, SimError> {
    strategies
        .iter()
        .map(|s| estimate_drawdown(problem, s, w0, m0, config))
        .collect()
}
