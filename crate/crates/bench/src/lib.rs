//! Shared fixtures for the criterion benchmarks.

use polypseg_core::rng::Rng;
use polypseg_core::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect(),
    )
}

pub fn random_mask(side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::seeded(seed);
    Tensor::new(
        &[1, side, side],
        (0..side * side)
            .map(|_| if rng.uniform() > 0.7 { 1.0 } else { 0.0 })
            .collect(),
    )
}
