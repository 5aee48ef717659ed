//! Seeded random number generation.
//!
//! A thin wrapper over ChaCha8 so that every sampling site in the crate
//! draws from the same deterministic stream type. Identical seeds and call
//! sequences produce bit-identical results on every platform.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Tensor;

/// Deterministic generator used for initialization, dropout, data
/// generation and shuffling.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[low, high)`.
    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Uniform integer in `[0, bound)` by rejection sampling.
    pub fn uniform_usize(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }

    /// Tensor with entries uniform in `[-limit, limit]` where
    /// `limit = sqrt(1 / fan_in)`.
    pub fn uniform_init(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let limit = libm::sqrt(1.0 / fan_in as f64);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.uniform(-limit, limit)).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape/data consistent by construction")
    }
}
