//! Input fixtures shared by the benchmarks.

use dic_core::diffusion::standard_normal;
use dic_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Activations `[n, c, h, h]` and a `c -> c` 3x3 weight.
pub fn conv_inputs(n: usize, c: usize, h: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(((n * 31 + c) * 31 + h) as u64);
    (standard_normal(vec![n, c, h, h], &mut rng), standard_normal(vec![c, c, 3, 3], &mut rng))
}

pub fn noise(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    standard_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}
