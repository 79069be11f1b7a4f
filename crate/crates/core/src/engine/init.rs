use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;

/// Glorot/Xavier uniform initialization for a `fan_in x fan_out` weight.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

pub fn normal_init<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}
