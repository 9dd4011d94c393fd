//! Shared fixtures for the criterion benchmarks.

use mgst_core::nn::init;
use mgst_core::tensor::Tensor;

/// Deterministic standard-normal tensor for benchmark inputs.
pub fn randn(seed: u64, name: &str, shape: &[usize]) -> Tensor<f32> {
    let mut rng = init::param_rng(seed, name);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| init::normal(&mut rng) as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}
