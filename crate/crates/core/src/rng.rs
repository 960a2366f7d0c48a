// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded generator used for every random quantity in the crate.
//!
//! The stream is SplitMix64 with the seed used directly as the initial state.
//! Uniform variates take the top 53 bits: `u = (x >> 11) * 2^-53`, so
//! `u` lies in `[0, 1)`. A symmetric draw with bound `b` is `(2u - 1) * b`.
//! Model weights only use these two conversions, which keeps them
//! reproducible from the seed in any language.

use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * bound
    }

    /// Standard normal draw. Only used for synthetic fixtures.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}
