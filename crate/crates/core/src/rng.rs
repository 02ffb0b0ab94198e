//! Deterministic pseudo-random numbers (splitmix64 core).
//!
//! Every stochastic choice in the crate flows through this generator so that
//! a single seed fixes initialization, batch order, and sampled ratios.

use alloc::vec::Vec;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Splitmix64 generator. Cheap, seedable, and stable across platforms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive an independent stream for a labeled sub-task (e.g. one training
    /// step). Streams depend only on (seed, label), never on draw order.
    pub fn derive(seed: u64, label: u64) -> Self {
        let mut rng = Self::new(seed ^ label.wrapping_mul(GOLDEN));
        rng.next_u64(); // decorrelate nearby labels
        rng
    }

    /// Raw generator state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Self { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f32(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32) / (1u64 << 24) as f32
    }

    /// Uniform in [0, 1) with 53-bit precision.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64) / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = self.next_f64().max(1e-12);
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        (r * libm::cos(2.0 * core::f64::consts::PI * u2)) as f32
    }

    /// Pick one element of a nonempty slice.
    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `count` values drawn from normal(0, std).
    pub fn normal_vec(&mut self, count: usize, std: f32) -> Vec<f32> {
        (0..count).map(|_| self.normal() * std).collect()
    }
}
