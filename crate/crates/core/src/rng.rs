//! Seeded random number generation.
//!
//! Everything random in the crate flows through [`Rng`], a thin wrapper over
//! ChaCha8 that derives uniform/normal/shuffle directly from `next_u64`.
//! Keeping the derivations in-crate pins the exact byte-for-byte sequence a
//! seed produces, which the reproducibility contracts depend on.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng as _, SeedableRng};

pub struct Rng {
    inner: ChaCha8Rng,
    /// Cached second value of the most recent Box-Muller pair.
    normal_cache: Option<f64>,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            normal_cache: None,
        }
    }

    /// Independent stream `stream` of the same seed. Used to decouple e.g.
    /// parameter init, shuffling and scale sampling so adding draws to one
    /// never perturbs the others.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            normal_cache: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `[0, n)` via rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; draws two uniforms per pair and
    /// caches the second value.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.normal_cache.take() {
            return v;
        }
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.normal_cache = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
