use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffusion::standard_normal;
use crate::error::Result;
use crate::gradcheck::{check, GradCheckReport};
use crate::model::{build_model, DiCModel, ForwardOptions, ModelConfig};
use crate::tensor::Tensor;

/// Std of the noise added to every parameter before a gradient check.
///
/// At initialization the zero gates and zero head block every upstream
/// gradient, which would make the check vacuous.
pub const PERTURB_STD: f64 = 0.05;

/// A 64-bit model with all parameters (including gates and head) perturbed.
pub fn perturbed_model(cfg: &ModelConfig, seed: u64) -> Result<DiCModel<f64>> {
    let mut model = build_model::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noise = Normal::new(0.0, PERTURB_STD).expect("valid std");
    for p in model.params_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok(model)
}

/// Finite-difference check of ∂MSE/∂θ for every parameter tensor.
pub fn gradcheck_model(cfg: &ModelConfig, seed: u64, coords: usize, h: f64) -> Result<GradCheckReport> {
    let model = perturbed_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let shape = vec![n, cfg.in_channels, cfg.image_size, cfg.image_size];
    let x: Tensor<f64> = standard_normal(shape.clone(), &mut rng);
    let target: Tensor<f64> = standard_normal(shape, &mut rng);
    let t: Vec<usize> = (0..n).map(|i| (cfg.timesteps - 1) * (i + 1) / (n + 1)).collect();
    let y: Vec<usize> = (0..n).map(|i| if i == n - 1 { cfg.null_class() } else { i % cfg.num_classes }).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    check(&names, &inputs, coords, h, seed, |tape, vars| {
        let xv = tape.constant(x.clone());
        let out = model.forward_with(tape, vars, xv, &t, &y, ForwardOptions::default(), None)?;
        let tv = tape.constant(target.clone());
        tape.mse(out, tv)
    })
}
