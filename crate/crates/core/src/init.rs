//! Seeded parameter initialisation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normal(0, std²) samples rejected outside `±2·std`.
pub fn trunc_normal<T: Scalar, R: Rng>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Tensor<T> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::from_f64(z * std);
            }
        })
        .collect();
    Tensor::from_raw(shape, data)
}

/// Standard-normal-scaled samples; used for test inputs.
pub fn normal<T: Scalar, R: Rng>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Tensor<T> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_raw(shape, data)
}
