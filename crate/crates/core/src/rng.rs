//! Seeded, platform-independent randomness.
//!
//! Backed by ChaCha8, a counter-based stream cipher generator: the stream is
//! a pure function of `(seed, stream id, position)`, so results are the same
//! on every platform and child generators can be split off without touching
//! the parent's position.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator for `stream`. Depends only on this
    /// generator's seed and `stream`, never on how much has been drawn.
    pub fn split(&self, stream: u64) -> RngState {
        let mut keyed = ChaCha8Rng::seed_from_u64(self.seed);
        keyed.set_stream(stream.wrapping_add(1));
        RngState::new(keyed.random())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// `n` draws from `N(mean, stddev²)`.
pub fn gaussian_sample<T: Scalar>(rng: &mut RngState, n: usize, mean: T, stddev: T) -> Result<Vec<T>> {
    if !mean.is_finite() || !stddev.is_finite() || stddev < T::zero() {
        return Err(Error::InvalidInput(format!(
            "gaussian_sample: need finite mean and stddev >= 0, got mean {mean}, stddev {stddev}"
        )));
    }
    let (mu, sigma) = (mean.as_f64(), stddev.as_f64());
    Ok((0..n).map(|_| T::c(mu + sigma * rng.standard_normal())).collect())
}
