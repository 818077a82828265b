//! Seeded pseudo-random generator.
//!
//! Backed by ChaCha8, a counter-based stream cipher generator: its full state
//! is the 32-byte seed plus a 128-bit word position, which is what
//! checkpoints record. Streams are reproducible across platforms.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::Float;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable generator state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream derived from this seed and a label, so that
    /// components seeded from the same config do not share draws.
    pub fn derived(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self::seed_from_u64(seed ^ h.rotate_left(17))
    }

    pub fn state(&self) -> RngState {
        RngState { seed: hex::encode(self.inner.get_seed()), word_pos: self.inner.get_word_pos().to_string() }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let bytes = hex::decode(&state.seed).ok()?;
        let seed: [u8; 32] = bytes.try_into().ok()?;
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_word_pos(state.word_pos.parse().ok()?);
        Some(Self { inner })
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal<F: Float>(&mut self, std: f64) -> F {
        let dist = Normal::new(0.0, std).expect("finite std");
        F::lit(dist.sample(&mut self.inner))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
