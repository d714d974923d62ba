use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::standard_normal;
use crate::error::Result;
use crate::tensor::kernels::{conv2d_forward, ConvGeom};
use crate::tensor::Tensor;
use crate::winograd::{winograd_conv3x3_with, winograd_mult_count, WinogradFilter};

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub shape: [usize; 4],
    pub cout: usize,
    pub direct_ms: f64,
    pub winograd_ms: f64,
    pub mult_ratio: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.direct_ms / self.winograd_ms
    }
}

/// Layer shapes `(n, c, h)` of square C→C 3×3 layers.
pub const DEFAULT_SHAPES: [(usize, usize, usize); 5] = [(1, 64, 16), (1, 96, 32), (1, 192, 16), (1, 384, 8), (1, 384, 16)];

/// Median-of-`reps` wall time of direct and Winograd convolution (32-bit).
///
/// The Winograd filter transform is done once outside the timed region, as
/// it is cached per layer during inference.
pub fn bench_conv(shapes: &[(usize, usize, usize)], reps: usize) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let reps = reps.max(1);
    shapes
        .iter()
        .map(|&(n, c, h)| {
            let x: Tensor<f32> = standard_normal(vec![n, c, h, h], &mut rng);
            let w: Tensor<f32> = standard_normal(vec![c, c, 3, 3], &mut rng);
            let g = ConvGeom { n, cin: c, h, w: h, cout: c, k: 3, stride: 1, pad: 1 };
            let filt = WinogradFilter::new(&w)?;
            let time = |f: &mut dyn FnMut()| {
                let mut v: Vec<f64> = (0..reps)
                    .map(|_| {
                        let s = Instant::now();
                        f();
                        s.elapsed().as_secs_f64() * 1e3
                    })
                    .collect();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            };
            let direct_ms = time(&mut || {
                std::hint::black_box(conv2d_forward(x.data(), w.data(), None, &g));
            });
            let winograd_ms = time(&mut || {
                std::hint::black_box(winograd_conv3x3_with(&x, &filt, None).expect("valid shape"));
            });
            Ok(BenchRow { shape: [n, c, h, h], cout: c, direct_ms, winograd_ms, mult_ratio: winograd_mult_count(h, h, c, c).ratio().to_f64() })
        })
        .collect()
}

pub struct BenchTable(pub Vec<BenchRow>);

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>10} {:>12} {:>8} {:>10}", "layer", "direct_ms", "winograd_ms", "speedup", "mult_ratio")?;
        for r in &self.0 {
            let [n, c, h, w] = r.shape;
            let layer = format!("{n}x{c}x{h}x{w}->{}", r.cout);
            writeln!(f, "{:<22} {:>10.3} {:>12.3} {:>8.2} {:>10.4}", layer, r.direct_ms, r.winograd_ms, r.speedup(), r.mult_ratio)?;
        }
        Ok(())
    }
}
