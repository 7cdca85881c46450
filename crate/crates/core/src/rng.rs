//! Counter-based random streams.
//!
//! A [`CounterRng`] is addressed by `(seed, stream)`; the same address
//! always yields the same sequence, so any consumer can be replayed or
//! resumed from its coordinates alone without storing generator state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seedable ChaCha8 keystream selected by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    inner: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Derives an independent stream for a named purpose and a counter
    /// (usually the training step).
    pub fn for_purpose(seed: u64, purpose: Purpose, counter: u64) -> Self {
        let stream = (purpose as u64) << 56 ^ counter;
        Self::new(seed, stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        (r * libm::cos(core::f64::consts::TAU * u2)) as f32
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Stream namespaces so that e.g. dropout masks and batch sampling for
/// the same step never share a keystream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Batch = 3,
    Split = 4,
    Synthetic = 5,
    Test = 6,
}
