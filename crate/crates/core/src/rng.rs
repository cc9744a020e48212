//! Deterministic random streams.
//!
//! Every random draw in the crate goes through [`SeededRng`]: a ChaCha8
//! generator keyed by a 64-bit seed and a stream id, so that independent
//! consumers (backbone weights, adapter init, data, negatives) never share a
//! sequence. Uniforms take the top 53 bits of a `u64`; normals use the cosine
//! branch of Box–Muller, one normal per pair of uniforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream ids for the independent consumers of a run seed.
pub mod streams {
    pub const BACKBONE: u64 = 1;
    pub const ADAPTER: u64 = 2;
    pub const TASK: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const CONTEXT: u64 = 6;
    pub const PROBLEMS: u64 = 7;
    pub const HEAD: u64 = 8;
    pub const HELD_OUT: u64 = 9;
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        // Lemire-style widening multiply; bias is negligible for the small n used here.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn gaussian(&mut self, std: f64) -> f64 {
        std * self.normal()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent() {
        let mut a = SeededRng::new(7, streams::BACKBONE);
        let mut b = SeededRng::new(7, streams::ADAPTER);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(11, 0);
        let mut b = SeededRng::new(11, 0);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = SeededRng::new(3, 0);
        let n = 20_000;
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = SeededRng::new(5, 0);
        for n in 1..20 {
            for _ in 0..50 {
                assert!(rng.below(n) < n);
            }
        }
    }
}
