//! Seeded randomness.
//!
//! The generator is xoshiro256++ seeded through SplitMix64 (the
//! `seed_from_u64` expansion), so a given seed produces the same stream on
//! every platform. Gaussian draws use the ziggurat sampler from `rand_distr`.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream `index` derived from `seed`: the base generator
    /// advanced by `index + 1` xoshiro jumps (2^128 draws each).
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut inner = Xoshiro256PlusPlus::seed_from_u64(seed);
        for _ in 0..=index {
            inner.jump();
        }
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }
}
