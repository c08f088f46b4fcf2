//! Seeded random sources. Every stochastic routine in the crate draws from a
//! [`Rng`] created here so that runs are reproducible per seed.

use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw from `[0, 1)`.
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub fn uniform_range(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// ±1 with equal probability.
pub fn rademacher(rng: &mut Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// A fresh 64-bit seed for a child generator.
pub fn next_seed(rng: &mut Rng) -> u64 {
    rng.random::<u64>()
}
