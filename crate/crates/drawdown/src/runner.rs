//! Multi-threaded Monte Carlo over disjoint path-index ranges.
//!
//! Each path's normals depend only on `(seed, path_index, step)` and tallies
//! are integer counts, so the result is the same for any worker count.

use std::num::NonZeroUsize;
use std::thread;

use drawdown_core::model::DrawdownProblem;
use drawdown_core::simulate::{self, SimConfig, SimError, SimEstimate, Strategy, Tally};

pub const THREADS_ENV: &str = "DRAWDOWN_THREADS";

/// Worker count: `DRAWDOWN_THREADS` if set to a positive integer, otherwise
/// the machine's available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<NonZeroUsize>().ok())
        .or_else(|| thread::available_parallelism().ok())
        .map_or(1, NonZeroUsize::get)
}

/// Splits `0..n` into at most `parts` contiguous ranges of near-equal size.
pub fn partition(n: u64, parts: usize) -> Vec<std::ops::Range<u64>> {
    let parts = (parts.max(1) as u64).min(n.max(1));
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + u64::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn estimate_parallel(
    problem: &DrawdownProblem,
    strategy: &Strategy,
    w0: f64,
    m0: f64,
    config: &SimConfig,
    threads: usize,
) -> Result<SimEstimate, SimError> {
    config.validate()?;
    strategy.validate()?;
    simulate::check_start(problem, w0, m0)?;
    let ranges = partition(config.n_paths, threads);
    let tallies: Vec<Tally> = if ranges.len() == 1 {
        vec![simulate::tally_paths(problem, strategy, w0, m0, config, ranges[0].clone())]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = ranges
                .into_iter()
                .map(|r| s.spawn(move || simulate::tally_paths(problem, strategy, w0, m0, config, r)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        })
    };
    let mut total = Tally::default();
    for t in &tallies {
        total.merge(t);
    }
    Ok(total.estimate(config.dt))
}

/// Estimates for several strategies on common random numbers.
pub fn compare_parallel(
    problem: &DrawdownProblem,
    strategies: &[Strategy],
    w0: f64,
    m0: f64,
    config: &SimConfig,
    threads: usize,
) -> Result<Vec<SimEstimate>, SimError> {
    strategies
        .iter()
        .map(|s| estimate_parallel(problem, s, w0, m0, config, threads))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use drawdown_core::model::{MarketParams, PayoutSpec};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn partition_covers_in_order(n in 0u64..10_000, parts in 1usize..64) {
            let ranges = partition(n, parts);
            prop_assert!(ranges.len() <= parts);
            let mut next = 0;
            for r in &ranges {
                prop_assert_eq!(r.start, next);
                next = r.end;
            }
            prop_assert_eq!(next, n);
            let lens: Vec<u64> = ranges.iter().map(|r| r.end - r.start).collect();
            prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let market = MarketParams::new(0.02, 0.08, 0.2).unwrap();
        let problem = DrawdownProblem::new(market, PayoutSpec::Constant { c: 0.05 }, 0.5).unwrap();
        let config = SimConfig::new(1e-2, 20.0, 301, 11).unwrap();
        let serial = simulate::estimate_drawdown(&problem, &Strategy::Optimal, 2.0, 3.0, &config).unwrap();
        for threads in [1, 2, 3, 7] {
            let parallel = estimate_parallel(&problem, &Strategy::Optimal, 2.0, 3.0, &config, threads).unwrap();
            assert_eq!(parallel.p_drawdown.to_bits(), serial.p_drawdown.to_bits());
            assert_eq!(parallel.mean_hit_time.to_bits(), serial.mean_hit_time.to_bits());
            assert_eq!(parallel.n_censored, serial.n_censored);
        }
    }
}
