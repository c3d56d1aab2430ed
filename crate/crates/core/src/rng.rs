//! Seeded, platform-independent randomness.
//!
//! [`SeededRng`] wraps ChaCha8, a counter-based generator whose output is a
//! pure function of `(seed, stream)`. The mapping from raw words to samples
//! is fixed here:
//!
//! * `f64` uniforms use the top 53 bits of a `u64`, `f32` uniforms the top
//!   24 bits of a `u32`; both lie in `[0, 1)`.
//! * standard normals use the Box–Muller cosine branch on two `f64`
//!   uniforms `u1, u2`: `sqrt(-2 ln(1 - u1)) * cos(2π u2)`.
//! * integers below `n` use rejection sampling on `u64` words.
//!
//! Work that needs independent randomness derives a child stream rather
//! than sharing one generator.

use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Uniform01,
    StandardNormal,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator on stream `stream` of the same seed. Does not
    /// advance `self`.
    pub fn child(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            inner,
            seed: self.seed,
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `n` draws as a rank-1 tensor.
    pub fn draw(&mut self, n: usize, dist: Sampling) -> Tensor<f32> {
        let data = match dist {
            Sampling::Uniform01 => (0..n).map(|_| self.uniform_f32()).collect(),
            Sampling::StandardNormal => (0..n).map(|_| self.standard_normal() as f32).collect(),
        };
        Tensor::from_vec(data)
    }
}

/// Mixes a base seed with extra words into a new seed (SplitMix64 finalizer
/// applied after each word). Used for per-cell and per-run seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(base);
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
