use std::collections::HashMap;
use std::sync::RwLock;

use drawdown_core::scale::ExponentMemo;

/// Thread-safe exponent cache keyed by the bit patterns of `(m, y)`.
#[derive(Debug, Default)]
pub struct SharedMemo {
    map: RwLock<HashMap<(u64, u64), f64>>,
}

impl SharedMemo {
    pub fn len(&self) -> usize {
        self.map.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExponentMemo for SharedMemo {
    fn lookup(&self, m: f64, y: f64) -> Option<f64> {
        self.map.read().ok()?.get(&(m.to_bits(), y.to_bits())).copied()
    }

    fn store(&self, m: f64, y: f64, value: f64) {
        if let Ok(mut map) = self.map.write() {
            map.insert((m.to_bits(), y.to_bits()), value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drawdown_core::model::{DrawdownProblem, MarketParams, PayoutSpec};
    use drawdown_core::{ScaleContext, Tolerance};
    use std::sync::Arc;

    #[test]
    fn memoised_context_matches_fresh() {
        let market = MarketParams::new(0.02, 0.08, 0.2).unwrap();
        let problem = DrawdownProblem::new(market, PayoutSpec::Constant { c: 0.05 }, 0.5).unwrap();
        let fresh = ScaleContext::new(problem.clone(), Tolerance::default()).unwrap();
        let memo = Arc::new(SharedMemo::default());
        let cached = fresh.clone().with_memo(memo.clone());
        for w in [1.2, 1.7, 2.3] {
            assert_eq!(cached.g(w, 2.0).unwrap(), fresh.g(w, 2.0).unwrap());
            assert_eq!(cached.g(w, 2.0).unwrap(), fresh.g(w, 2.0).unwrap());
        }
        assert!(!memo.is_empty());
    }
}
