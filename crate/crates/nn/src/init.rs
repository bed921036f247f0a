//! Weight initialisation helpers (no external distribution crates).

use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::Rng;

/// Standard normal sample via Box-Muller.
pub fn randn(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-normal initialisation: N(0, sqrt(2/fan_in)).
pub fn kaiming(rng: &mut StdRng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| randn(rng) * std)
}

/// N(0, std) initialisation, for embeddings and small heads.
pub fn normal(rng: &mut StdRng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| randn(rng) * std)
}
