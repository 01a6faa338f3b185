//! Deterministic random streams.
//!
//! Every stochastic operation in the crate takes a seed and derives one of
//! these. ChaCha12 gives platform-independent streams; Gaussian draws use
//! Box–Muller on top so no distribution-crate version can shift results.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::util::fnv1a64;

pub struct Rng {
    inner: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            inner: ChaCha12Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent substream for `(seed, label)`, order-insensitive.
    ///
    /// Used to give each scene / sample / worker its own stream so results do
    /// not depend on processing order.
    pub fn substream(seed: u64, label: &[u8]) -> Self {
        let mut bytes = [0u8; 24];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        let n = label.len().min(16);
        bytes[8..8 + n].copy_from_slice(&label[..n]);
        Rng::from_seed(fnv1a64(&bytes))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Rejection sampling keeps the distribution exact.
        let zone = u64::MAX - (u64::MAX % n as u64);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n as u64) as usize;
            }
        }
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = crate::mathx::sqrt(-2.0 * crate::mathx::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * crate::mathx::sin(theta));
        r * crate::mathx::cos(theta)
    }

    pub fn normal_scaled(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.normal()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        if items.len() < 2 {
            return;
        }
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices out of `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> alloc::vec::Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}
