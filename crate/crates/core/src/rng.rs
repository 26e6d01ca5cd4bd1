//! Seeded random numbers.
//!
//! The generator is ChaCha8 (`rand_chacha`), whose output stream depends only
//! on key and stream id and is therefore identical on every platform. Each concern
//! (backbone init, head init, adapters, shuffling, dropout, data) draws from
//! its own ChaCha stream of the same seed, so enabling one feature never
//! shifts the random numbers another feature sees.
//!
//! Uniforms are `rand`'s 53-bit `[0, 1)` doubles. Gaussians use the
//! Box-Muller transform on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`,
//! discarding the sine partner so every normal draw consumes exactly two
//! uniforms.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent sub-streams of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Backbone = 1,
    Head = 2,
    Adapter = 3,
    Prompt = 4,
    Shuffle = 5,
    Dropout = 6,
    Data = 7,
    Test = 99,
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, Stream::Test)
    }

    pub fn stream(seed: u64, stream: Stream) -> Self {
        Self::with_stream_id(seed, stream as u64)
    }

    pub fn with_stream_id(seed: u64, id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(id);
        Self { inner }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_with(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }
}
