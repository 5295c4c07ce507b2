//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::{r, Real};
use crate::tensor::Tensor;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual linear-layer default.
pub fn linear<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

pub fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| r(rng.random_range(-bound..=bound)))
}

pub fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    Tensor::from_fn(shape, |_| r(dist.sample(rng)))
}

/// Standard normal noise.
pub fn randn<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    normal(rng, shape, 1.0)
}
