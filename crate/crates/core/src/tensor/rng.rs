//! Seeded random-number generation.
//!
//! The integer stream is xoshiro256++ seeded through SplitMix64
//! (`rand_xoshiro`'s `seed_from_u64`), which is portable and fully specified.
//! Every real-valued draw is derived from that stream with the conversions
//! documented on each method, so any language can reproduce a run bit for bit.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Deterministic generator state.
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

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent generator for a named sub-stream. The child seed is
    /// `splitmix64(seed ^ (salt * 0x9E3779B97F4A7C15))`, independent of how
    /// many draws this generator has made.
    pub fn derive(&self, salt: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1): the top 53 bits of one `u64`, scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform on [lo, hi) as `lo + (hi - lo) * next_f64()`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let v = lo + (hi - lo) * self.next_f64();
        // rounding can land exactly on hi for tiny intervals
        if v >= hi {
            lo
        } else {
            v
        }
    }

    /// Standard normal by the basic Box-Muller transform, one value per call:
    /// `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)` with `u1`, `u2` from `next_f64`.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` by rejection sampling on the `u64` stream.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, drawn without replacement
    /// (partial Fisher-Yates from the front).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Index drawn from a discrete distribution given by nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // fall through on rounding: last class with positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
