//! The single pseudo-random source used across the project.
//!
//! Xoshiro256++ seeded through SplitMix64 (`seed_from_u64`). Derived draws
//! are defined here explicitly so other implementations can reproduce them:
//!
//! * `uniform()` = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * `below(n)` = `next_u64() % n`
//! * `range(a, b)` = `a + (b - a) * uniform()`

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const ALGORITHM: &str = "xoshiro256++/splitmix64-seed/v1";

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// In-place Fisher-Yates using [`below`](Self::below).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child stream, e.g. one per clip.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
