//! Order-statistic prediction intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// 1-based rank of the lower endpoint, `floor(q (m + 1))` clamped to `[1, m]`.
pub fn lower_rank(q: f64, m: usize) -> usize {
    let r = (q * (m as f64 + 1.0)).floor();
    (r.max(1.0) as usize).min(m)
}

/// 1-based rank of the upper endpoint, `ceil((1 - q)(m + 1))` clamped to `[1, m]`.
pub fn upper_rank(q: f64, m: usize) -> usize {
    let r = ((1.0 - q) * (m as f64 + 1.0)).ceil();
    (r.max(1.0) as usize).min(m)
}

/// The `k`-th smallest value (1-based) of `v`. Reorders `v`.
pub fn kth_smallest(v: &mut [f64], k: usize) -> f64 {
    assert!(k >= 1 && k <= v.len());
    let (_, x, _) = v.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *x
}

/// Interval from posterior draws: the `floor(alpha/2 (S+1))`-th and
/// `ceil((1 - alpha/2)(S+1))`-th smallest draws.
pub fn empirical_interval(draws: &[f64], alpha: f64) -> Result<Interval> {
    if draws.is_empty() {
        return Err(Error::NoDraws);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let m = draws.len();
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = sorted[lower_rank(alpha / 2.0, m) - 1];
    let hi = sorted[upper_rank(alpha / 2.0, m) - 1];
    Ok(Interval {
        lo,
        hi,
        level: 1.0 - alpha,
    })
}
