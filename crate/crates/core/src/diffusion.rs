//! DDPM forward process, ε-prediction loss and ancestral sampling with
//! classifier-free guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::{DicError, Result};
use crate::model::{apply_label_drop, DiCModel, ForwardOptions};
use crate::tensor::{Element, Tensor};

/// Linear-β noise schedule. All tables are kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// β̃ₜ = βₜ(1 − ᾱₜ₋₁)/(1 − ᾱₜ), with ᾱ₋₁ = 1.
    pub posterior_variance: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(DicError::config("diffusion.timesteps", "must be at least 1"));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(DicError::config(
            "diffusion.beta_start",
            format!("need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"),
        ));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_variance = (0..steps)
        .map(|t| {
            let prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
            beta[t] * (1.0 - prev) / (1.0 - alpha_bar[t])
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar, posterior_variance })
}

impl NoiseSchedule {
    /// The DDPM defaults: 1000 steps, β from 1e-4 to 0.02.
    pub fn linear_default() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(DicError::index(op, format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// Independent generator for one (seed, stream) pair.
///
/// Streams are keyed by sample index or training step, so results do not
/// depend on batch composition or evaluation order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<T: Element>(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(StandardNormal.sample(rng)))
}

/// √ᾱₜ·x₀ + √(1 − ᾱₜ)·ε with a timestep per sample.
pub fn q_sample<T: Element>(x0: &Tensor<T>, t: &[usize], noise: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != noise.shape() {
        return Err(DicError::shape("q_sample", format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape())));
    }
    let n = x0.shape().first().copied().unwrap_or(0);
    if t.len() != n {
        return Err(DicError::shape("q_sample", format!("{} timesteps for batch {n}", t.len())));
    }
    let per = if n == 0 { 0 } else { x0.numel() / n };
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        sched.check_t("q_sample", ti)?;
        let a = T::from_f64(sched.alpha_bar[ti].sqrt());
        let b = T::from_f64((1.0 - sched.alpha_bar[ti]).sqrt());
        let r = i * per..(i + 1) * per;
        out.extend(x0.data()[r.clone()].iter().zip(&noise.data()[r]).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Anything that predicts ε from (xₜ, t, y).
pub trait Denoiser<T: Element> {
    fn predict_noise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Tensor<T>>;
    /// Label used for the unconditional pass.
    fn null_class(&self) -> usize;
    /// `[channels, height, width]` of one sample.
    fn sample_shape(&self) -> [usize; 3];
}

impl<T: Element> Denoiser<T> for DiCModel<T> {
    fn predict_noise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Tensor<T>> {
        self.predict(x, t, y, ForwardOptions::default())
    }

    fn null_class(&self) -> usize {
        self.config().null_class()
    }

    fn sample_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.in_channels, c.image_size, c.image_size]
    }
}

/// A model evaluated with non-default forward options (e.g. the Winograd path).
pub struct WithOptions<'a, T>(pub &'a DiCModel<T>, pub ForwardOptions);

impl<T: Element> Denoiser<T> for WithOptions<'_, T> {
    fn predict_noise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Tensor<T>> {
        self.0.predict(x, t, y, self.1)
    }

    fn null_class(&self) -> usize {
        self.0.null_class()
    }

    fn sample_shape(&self) -> [usize; 3] {
        self.0.sample_shape()
    }
}

/// One noised minibatch: inputs and regression target.
#[derive(Clone, Debug)]
pub struct TrainingBatch<T> {
    pub x_t: Tensor<T>,
    pub t: Vec<usize>,
    /// Labels after label drop.
    pub y: Vec<usize>,
    pub noise: Tensor<T>,
}

/// Draws t, ε and the label-drop decisions for one step.
pub fn make_training_batch<T: Element>(
    x0: &Tensor<T>,
    y: &[usize],
    sched: &NoiseSchedule,
    label_drop_prob: f64,
    null_class: usize,
    rng: &mut impl Rng,
) -> Result<TrainingBatch<T>> {
    let n = x0.shape().first().copied().unwrap_or(0);
    if y.len() != n {
        return Err(DicError::shape("training_loss", format!("{} labels for batch {n}", y.len())));
    }
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.steps())).collect();
    let noise = standard_normal(x0.shape().to_vec(), rng);
    let y = apply_label_drop(y, label_drop_prob, null_class, rng);
    let x_t = q_sample(x0, &t, &noise, sched)?;
    Ok(TrainingBatch { x_t, t, y, noise })
}

/// Loss value for a batch without recording gradients.
pub fn batch_loss<T: Element>(model: &impl Denoiser<T>, batch: &TrainingBatch<T>) -> Result<f64> {
    let pred = model.predict_noise(&batch.x_t, &batch.t, &batch.y)?;
    mse(&pred, &batch.noise)
}

/// ε-prediction MSE on a fresh noised batch.
pub fn training_loss<T: Element>(
    model: &impl Denoiser<T>,
    x0: &Tensor<T>,
    y: &[usize],
    sched: &NoiseSchedule,
    label_drop_prob: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = make_training_batch(x0, y, sched, label_drop_prob, model.null_class(), rng)?;
    batch_loss(model, &batch)
}

/// Records the loss of `batch` on `tape`, returning the loss and parameter leaves.
pub fn record_loss<T: Element>(model: &DiCModel<T>, tape: &mut Tape<T>, batch: &TrainingBatch<T>) -> Result<(Var, Vec<Var>)> {
    let x = tape.constant(batch.x_t.clone());
    let pass = model.forward(tape, x, &batch.t, &batch.y, true)?;
    let target = tape.constant(batch.noise.clone());
    Ok((tape.mse(pass.output, target)?, pass.params))
}

fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(DicError::shape("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).to_f64().powi(2)).sum();
    Ok(sum / a.numel().max(1) as f64)
}

/// `eps_u + s·(eps_c − eps_u)`; `s = 1` returns `eps_c` exactly.
pub fn cfg_combine<T: Element>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(DicError::shape("cfg_combine", format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    let s = T::from_f64(s);
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

/// How the two guidance passes are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CfgMode {
    /// One forward over the batch duplicated with null labels.
    #[default]
    Batched,
    TwoPass,
}

/// Guided ε for a whole batch at one timestep. `s = 1` skips the null pass.
pub fn guided_eps<T: Element>(model: &impl Denoiser<T>, x_t: &Tensor<T>, t: usize, y: &[usize], s: f64, mode: CfgMode) -> Result<Tensor<T>> {
    let n = y.len();
    let ts = vec![t; n];
    if s == 1.0 {
        return model.predict_noise(x_t, &ts, y);
    }
    let null = vec![model.null_class(); n];
    match mode {
        CfgMode::TwoPass => {
            let c = model.predict_noise(x_t, &ts, y)?;
            let u = model.predict_noise(x_t, &ts, &null)?;
            cfg_combine(&c, &u, s)
        }
        CfgMode::Batched => {
            let x2 = Tensor::stack_batch(&[x_t.clone(), x_t.clone()])?;
            let y2: Vec<usize> = y.iter().copied().chain(null).collect();
            let out = model.predict_noise(&x2, &vec![t; 2 * n], &y2)?;
            cfg_combine(&out.slice_batch(0, n)?, &out.slice_batch(n, n)?, s)
        }
    }
}

/// One ancestral step xₜ → xₜ₋₁ with fixed variance β̃ₜ.
///
/// `rngs` holds one generator per sample; none is touched at `t = 0`.
pub fn ddpm_step<T: Element>(
    model: &impl Denoiser<T>,
    x_t: &Tensor<T>,
    t: usize,
    y: &[usize],
    s: f64,
    sched: &NoiseSchedule,
    rngs: &mut [ChaCha8Rng],
    mode: CfgMode,
) -> Result<Tensor<T>> {
    sched.check_t("ddpm_step", t)?;
    if rngs.len() != y.len() {
        return Err(DicError::shape("ddpm_step", format!("{} generators for {} samples", rngs.len(), y.len())));
    }
    let eps = guided_eps(model, x_t, t, y, s, mode)?;
    posterior_step(x_t, &eps, t, sched, rngs)
}

fn posterior_step<T: Element>(x_t: &Tensor<T>, eps: &Tensor<T>, t: usize, sched: &NoiseSchedule, rngs: &mut [ChaCha8Rng]) -> Result<Tensor<T>> {
    let n = rngs.len();
    let per = if n == 0 { 0 } else { x_t.numel() / n };
    let inv_sqrt_alpha = 1.0 / sched.alpha[t].sqrt();
    let eps_coef = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    let sigma = sched.posterior_variance[t].sqrt();
    let mut out = Vec::with_capacity(x_t.numel());
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in i * per..(i + 1) * per {
            let mean = inv_sqrt_alpha * (x_t.data()[j].to_f64() - eps_coef * eps.data()[j].to_f64());
            let z = if t > 0 { sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) } else { 0.0 };
            out.push(T::from_f64(mean + z));
        }
    }
    Tensor::new(x_t.shape().to_vec(), out)
}

/// Full ancestral sampling from pure noise, one generator stream per sample.
pub fn sample<T: Element>(model: &impl Denoiser<T>, y: &[usize], s: f64, sched: &NoiseSchedule, seed: u64, mode: CfgMode) -> Result<Tensor<T>> {
    let [c, h, w] = model.sample_shape();
    let mut rngs: Vec<ChaCha8Rng> = (0..y.len() as u64).map(|i| stream_rng(seed, i)).collect();
    let parts: Vec<Tensor<T>> = rngs.iter_mut().map(|r| standard_normal(vec![1, c, h, w], r)).collect();
    let mut x = Tensor::stack_batch(&parts)?;
    for t in (0..sched.steps()).rev() {
        x = ddpm_step(model, &x, t, y, s, sched, &mut rngs, mode)?;
    }
    Ok(x)
}
