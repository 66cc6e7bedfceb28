//! Minimum probability of drawdown for a fund paying out at a deterministic,
//! wealth-dependent rate in a Black–Scholes market.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: the numerical kernels, the payout/market model, the scale
//! function machinery, the optimal feedback strategy and the value function
//! `phi`, a Monte Carlo path kernel, and independent oracles used to check the
//! quadrature route. File formats, threading and the command line live in the
//! companion `drawdown` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod math;

pub mod model;
pub mod numerics;
pub mod oracle;
pub mod policy;
pub mod scale;
pub mod simulate;

pub use model::{DrawdownProblem, MarketParams, PayoutSpec, Regime, StatePoint};
pub use numerics::Tolerance;
pub use policy::{PhiBranch, PhiSlice, PhiValue};
pub use scale::ScaleContext;
pub use simulate::{SimConfig, SimEstimate, Strategy};
