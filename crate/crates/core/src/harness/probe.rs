use crate::error::{DicError, Result};
use crate::tensor::Tensor;

/// Multinomial logistic regression on raw pixels.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    classes: usize,
    dim: usize,
    /// `[classes, dim]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

fn rows(x: &Tensor<f32>) -> Result<(usize, usize)> {
    let n = *x.shape().first().ok_or_else(|| DicError::shape("probe", "empty shape"))?;
    Ok((n, if n == 0 { 0 } else { x.numel() / n }))
}

impl LinearProbe {
    /// Full-batch gradient descent on softmax cross-entropy.
    pub fn fit(x: &Tensor<f32>, labels: &[usize], classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        let (n, dim) = rows(x)?;
        if labels.len() != n || n == 0 {
            return Err(DicError::shape("probe", format!("{} labels for {n} samples", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DicError::index("probe", format!("label {bad} of {classes}")));
        }
        let mut p = LinearProbe { classes, dim, weight: vec![0.0; classes * dim], bias: vec![0.0; classes] };
        let data: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for _ in 0..epochs {
            gw.fill(0.0);
            gb.fill(0.0);
            for (i, &y) in labels.iter().enumerate() {
                let xi = &data[i * dim..(i + 1) * dim];
                let probs = p.softmax(xi);
                for k in 0..classes {
                    let d = probs[k] - if k == y { 1.0 } else { 0.0 };
                    gb[k] += d;
                    for (g, &v) in gw[k * dim..(k + 1) * dim].iter_mut().zip(xi) {
                        *g += d * v;
                    }
                }
            }
            let step = lr / n as f64;
            p.weight.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
            p.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
        }
        Ok(p)
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> =
            (0..self.classes).map(|k| self.bias[k] + self.weight[k * self.dim..(k + 1) * self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let (n, dim) = rows(x)?;
        if dim != self.dim {
            return Err(DicError::shape("probe", format!("sample size {dim}, probe expects {}", self.dim)));
        }
        Ok((0..n)
            .map(|i| {
                let xi: Vec<f64> = x.data()[i * dim..(i + 1) * dim].iter().map(|&v| v as f64).collect();
                let p = self.softmax(&xi);
                (0..self.classes).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0)
            })
            .collect())
    }

    /// Fraction of samples classified as their label.
    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != labels.len() {
            return Err(DicError::shape("probe", format!("{} labels for {} samples", labels.len(), pred.len())));
        }
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }
}
