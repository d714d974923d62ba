use crate::model::{OptimizerState, Parameter};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64, params: &[Parameter<f32>]) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamW { lr, beta1, beta2, eps, weight_decay, state: OptimizerState { step: 0, m: zeros.clone(), v: zeros } }
    }

    pub fn step(&mut self, params: &mut [Parameter<f32>], grads: &[Tensor<f32>]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.state.m.iter_mut().zip(self.state.v.iter_mut())) {
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mn = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let mut wn = *w as f64 * (1.0 - self.lr * self.weight_decay);
                wn -= self.lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *w = wn as f32;
            }
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}
