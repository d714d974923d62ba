use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::RunConfig;
use crate::diffusion::stream_rng;
use crate::error::Result;
use crate::tensor::Tensor;

/// Generator streams are namespaced so data, training noise and evaluation
/// never share a stream for the same seed.
pub(crate) const DATA_STREAM: u64 = 0;
pub(crate) const EVAL_DATA_STREAM: u64 = 1 << 60;
pub(crate) const TRAIN_STREAM: u64 = 2 << 60;
pub(crate) const EVAL_NOISE_STREAM: u64 = 3 << 60;

/// The pattern family each class is drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pattern {
    /// Axis-aligned Gaussian blob.
    Blob,
    Ring,
    /// Vertical stripes with this many cycles across the image.
    Stripes(usize),
}

/// Synthetic class-conditional images in `[-1, 1]`.
///
/// Class 0 is a blob, class 1 a ring, and class `k ≥ 2` stripes with `k`
/// cycles. Position, radius and phase are jittered per sample, then pixel
/// noise is added and the result clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ToyDataset {
    pub fn from_run(run: &RunConfig) -> Self {
        ToyDataset {
            num_classes: run.model.num_classes,
            image_size: run.model.image_size,
            channels: run.model.in_channels,
            noise_sigma: run.noise_sigma,
            seed: run.seed,
        }
    }

    pub fn pattern(class: usize) -> Pattern {
        match class {
            0 => Pattern::Blob,
            1 => Pattern::Ring,
            k => Pattern::Stripes(k),
        }
    }

    pub fn label(&self, index: u64) -> usize {
        (index % self.num_classes as u64) as usize
    }

    fn render(&self, index: u64, stream_base: u64) -> (Vec<f32>, usize) {
        let s = self.image_size as f64;
        let y = self.label(index);
        let mut rng = stream_rng(self.seed, stream_base + index);
        let mut jitter = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
        let (cx, cy) = (s / 2.0 - 0.5 + jitter(s / 8.0), s / 2.0 - 0.5 + jitter(s / 8.0));
        let field: Box<dyn Fn(f64, f64) -> f64> = match Self::pattern(y) {
            Pattern::Blob => {
                let (sx, sy) = (s / 6.0, s / 10.0);
                Box::new(move |px, py| (-0.5 * (((px - cx) / sx).powi(2) + ((py - cy) / sy).powi(2))).exp())
            }
            Pattern::Ring => {
                let r = s / 4.0 + jitter(s / 16.0);
                Box::new(move |px, py| {
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r;
                    (-0.5 * (d / 1.0).powi(2)).exp()
                })
            }
            Pattern::Stripes(cycles) => {
                let phase = jitter(std::f64::consts::PI / 8.0);
                Box::new(move |px, _| 0.5 + 0.5 * (2.0 * std::f64::consts::PI * cycles as f64 * px / s + phase).sin())
            }
        };
        let n = self.image_size;
        let mut out = Vec::with_capacity(self.channels * n * n);
        for _ in 0..self.channels {
            for py in 0..n {
                for px in 0..n {
                    let base = 2.0 * field(px as f64, py as f64) - 1.0;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    out.push((base + self.noise_sigma * noise).clamp(-1.0, 1.0) as f32);
                }
            }
        }
        (out, y)
    }

    /// Sample `index`: image `[channels, size, size]` and its label.
    pub fn sample(&self, index: u64) -> (Tensor<f32>, usize) {
        let (data, y) = self.render(index, DATA_STREAM);
        (Tensor::new(vec![self.channels, self.image_size, self.image_size], data).expect("toy shape"), y)
    }

    fn batch_from(&self, start: u64, n: usize, stream_base: u64) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(n * self.channels * self.image_size * self.image_size);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let (d, y) = self.render(start + i, stream_base);
            data.extend(d);
            labels.push(y);
        }
        Ok((Tensor::new(vec![n, self.channels, self.image_size, self.image_size], data)?, labels))
    }

    /// Samples `start..start + n` stacked as `[n, c, h, w]`.
    pub fn batch(&self, start: u64, n: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        self.batch_from(start, n, DATA_STREAM)
    }

    /// A held-out set drawn from a stream disjoint from training data.
    pub fn held_out(&self, n: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        self.batch_from(0, n, EVAL_DATA_STREAM)
    }
}
