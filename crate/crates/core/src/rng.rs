//! Seeded, splittable pseudo-randomness.
//!
//! Every experiment cell, dataset slot and training run derives its own stream
//! from a root seed with [`Rng::split`], so results do not depend on the order
//! in which independent work is executed.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// ChaCha8 counter-based generator keyed by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Depends only on this generator's seed and
    /// `stream`, never on how many values have been drawn.
    pub fn split(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(1))))
    }

    /// Child stream keyed by a string label.
    pub fn split_named(&self, label: &str) -> Rng {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.split(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            sigma * self.normal()
        }
    }

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
    fn equal_seeds_equal_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ_somewhere_in_first_1000() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let differs = (0..1000).any(|_| a.next_u64() != b.next_u64());
        assert!(differs);
    }

    #[test]
    fn split_ignores_draw_position() {
        let root = Rng::new(9);
        let mut advanced = root.clone();
        for _ in 0..17 {
            advanced.next_u64();
        }
        assert_eq!(root.split(3).next_u64(), advanced.split(3).next_u64());
        assert_ne!(root.split(3).next_u64(), root.split(4).next_u64());
    }

    #[test]
    fn known_first_draw_is_stable() {
        // Pinned so a dependency bump that changes the stream is noticed.
        assert_eq!(Rng::new(7).next_u64(), 2910824217569608635);
        assert_eq!(Rng::new(7).split(3).next_u64(), 2423149897999618430);
    }
}
