//! Deterministic random streams.
//!
//! Every random decision is drawn from a ChaCha8 stream addressed by
//! `(seed, stream)`. Stream ids are derived from a purpose tag plus the
//! coordinates of the decision (sweep, tree, leaf, test point, ...), so the
//! values never depend on evaluation order or thread count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. The discriminant is mixed into the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Grow = 1,
    Leaf = 2,
    Sigma = 3,
    Noise = 4,
    GpDraw = 5,
    Subsample = 6,
    Fold = 7,
    Dgp = 8,
    Propensity = 9,
    Scalars = 10,
    Experiment = 11,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a purpose and coordinates into a 64-bit stream id.
pub fn stream_id(purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(purpose as u64);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x51_7CC1_B727_220A)));
    }
    h
}

/// A single-owner random stream. Same `(seed, stream)` gives a bit-identical
/// sequence on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose, coords: &[u64]) -> Self {
        Self::new(seed, stream_id(purpose, coords))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn std_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.std_normal()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n and irrelevant here.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }

    /// `k` distinct elements of `0..n` chosen uniformly, in increasing order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngStream::new(7, 4);
        assert_ne!(RngStream::new(7, 3).next_u64(), c.next_u64());
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Frozen so that an accidental change of generator is caught.
        let mut r = RngStream::new(0, 0);
        let first = r.next_u64();
        let mut again = RngStream::new(0, 0);
        assert_eq!(first, again.next_u64());
        assert_eq!(first, ChaCha8Rng::seed_from_u64(0).next_u64());
    }

    #[test]
    fn stream_ids_separate_purposes_and_coords() {
        let a = stream_id(Purpose::Grow, &[0, 1]);
        assert_ne!(a, stream_id(Purpose::Leaf, &[0, 1]));
        assert_ne!(a, stream_id(Purpose::Grow, &[1, 0]));
        assert_ne!(a, stream_id(Purpose::Grow, &[0, 1, 0]));
    }

    #[test]
    fn subsample_is_distinct_and_sorted() {
        let mut r = RngStream::new(1, 1);
        let s = r.sample_without_replacement(50, 20);
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r.sample_without_replacement(5, 10), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngStream::new(9, 9);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
