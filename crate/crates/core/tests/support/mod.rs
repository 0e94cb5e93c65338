//! Oracle suites shared by the integration tests and the acceptance target.
#![allow(dead_code)]

pub mod evaluator;
pub mod gradients;
pub mod kernels;

use mffd::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: mffd::tensor::Real>(rng: &mut impl Rng, shape: Shape) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _| T::from_f64(rng.gen_range(-1.0..1.0)).unwrap())
}

/// Largest disagreement of one kernel over its random cases.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}
