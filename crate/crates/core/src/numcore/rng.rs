//! Seedable, platform-independent random streams.
//!
//! The generator is ChaCha8 (`rand_chacha`), seeded through
//! `SeedableRng::seed_from_u64`. Independent streams for parallel work
//! (one per episode or worker) select a ChaCha stream id with the same
//! key, so `Rng::stream(seed, i)` never overlaps `Rng::stream(seed, j)`.
//!
//! Standard normals use the Box–Muller transform on two uniforms
//! `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`:
//! `z0 = √(−2 ln u1)·cos(2π u2)`, `z1 = √(−2 ln u1)·sin(2π u2)`.
//! Both values are used; the second is cached for the next call.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Independent stream `index` derived from `seed`.
    pub fn stream(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Self { seed, inner, spare: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = self.normal();
        }
        t
    }

    pub fn beta(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        let d = Beta::new(alpha, beta)
            .map_err(|e| Error::Domain(format!("Beta({alpha}, {beta}): {e}")))?;
        Ok(d.sample(&mut self.inner))
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
