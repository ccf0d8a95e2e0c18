//! Parameter initializers.

use alloc::vec;

use rand::Rng;

use crate::math::sqrt;
use crate::Tensor;

/// Scaled uniform draw with bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = sqrt(6.0 / (fan_in + fan_out) as f64);
    uniform(rng, &[fan_in, fan_out], bound)
}

/// Uniform draw in `[-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

pub fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

pub fn ones(n: usize) -> Tensor {
    Tensor::new(&[n], vec![1.0; n]).expect("positive length")
}
