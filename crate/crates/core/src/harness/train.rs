use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::dataset::{ToyDataset, EVAL_NOISE_STREAM, TRAIN_STREAM};
use super::optim::{grad_norm, AdamW};
use super::RunConfig;
use crate::analyzer::count_flops;
use crate::autograd::Tape;
use crate::diffusion::{batch_loss, make_training_batch, record_loss, stream_rng, NoiseSchedule};
use crate::error::{DicError, Result};
use crate::model::{build_model, Checkpoint, DiCModel};

/// Per-step cost (analyzer units × batch × 3 for forward and backward) above
/// which `train` warns that the run is not desk-scale.
pub const STEP_COST_WARN: f64 = 2e11;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wallclock_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss,grad_norm,wallclock_ms";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{:.3}", self.step, self.loss, self.grad_norm, self.wallclock_ms)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this checkpoint (which must carry optimizer state).
    pub resume: Option<&'a Path>,
    /// Stop after this many completed steps, checkpointing first.
    pub stop_after: Option<u64>,
    pub on_step: Option<&'a mut dyn FnMut(&MetricRow)>,
}

pub struct TrainOutcome {
    pub model: DiCModel<f32>,
    pub optimizer: AdamW,
    /// Rows produced by this invocation.
    pub metrics: Vec<MetricRow>,
    /// `(step, held-out loss)` at the eval cadence.
    pub evals: Vec<(u64, f64)>,
}

/// Warning text when one training step is far beyond desk scale.
pub fn step_cost_warning(run: &RunConfig) -> Result<Option<String>> {
    let per_sample = count_flops(&run.model, run.model.image_size, false)? as f64;
    let cost = per_sample * run.batch_size as f64 * 3.0;
    Ok((cost > STEP_COST_WARN).then(|| format!("estimated {:.3e} units per step exceeds {STEP_COST_WARN:.1e}; this run is not desk-scale", cost)))
}

/// Held-out ε-MSE with fixed timesteps and noise, no label drop.
pub fn eval_loss(model: &DiCModel<f32>, run: &RunConfig, sched: &NoiseSchedule) -> Result<f64> {
    let ds = ToyDataset::from_run(run);
    let (x0, y) = ds.held_out(run.eval_size)?;
    let mut rng = stream_rng(run.seed, EVAL_NOISE_STREAM);
    let batch = make_training_batch(&x0, &y, sched, 0.0, model.config().null_class(), &mut rng)?;
    batch_loss(model, &batch)
}

fn open_metrics(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let exists = append && path.exists();
    let file = OpenOptions::new().create(true).write(true).append(exists).truncate(!exists).open(path).map_err(|e| DicError::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !exists {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| DicError::io(path, e))?;
    }
    Ok(w)
}

fn save(run: &RunConfig, model: &DiCModel<f32>, opt: &AdamW) -> Result<()> {
    if let Some(path) = &run.checkpoint_path {
        Checkpoint::from_model(model, run.to_text(), Some(opt.state.clone())).save(path)?;
    }
    Ok(())
}

/// Trains in f32. All randomness is keyed by (seed, step), so an interrupted
/// and resumed run ends bitwise identical to an uninterrupted one.
pub fn train(run: &RunConfig, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    run.validate()?;
    let sched = run.schedule()?;
    let ds = ToyDataset::from_run(run);
    let (mut model, mut opt) = match opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cfg = ckpt.model_config()?;
            if cfg != run.model {
                return Err(DicError::Checkpoint { path: path.to_path_buf(), reason: "model config differs from the run config".into() });
            }
            let state = ckpt.optimizer.clone().ok_or_else(|| DicError::Checkpoint { path: path.to_path_buf(), reason: "no optimizer state to resume from".into() })?;
            let model = ckpt.to_model::<f32>()?;
            let mut opt = AdamW::new(run.lr, run.adam_beta1, run.adam_beta2, run.adam_eps, run.weight_decay, model.params());
            opt.state = state;
            (model, opt)
        }
        None => {
            let model = build_model::<f32>(&run.model, run.seed)?;
            let opt = AdamW::new(run.lr, run.adam_beta1, run.adam_beta2, run.adam_eps, run.weight_decay, model.params());
            (model, opt)
        }
    };
    let start = opt.state.step;
    let end = opts.stop_after.map_or(run.steps, |s| s.min(run.steps));
    let mut log = match &run.metrics_path {
        Some(p) => Some((open_metrics(p, opts.resume.is_some())?, p.clone())),
        None => None,
    };
    let clock = Instant::now();
    let mut metrics = Vec::new();
    let mut evals = Vec::new();
    let null = run.model.null_class();
    for step in start..end {
        let (x0, y) = ds.batch(step * run.batch_size as u64, run.batch_size)?;
        let mut rng = stream_rng(run.seed, TRAIN_STREAM + step);
        let batch = make_training_batch(&x0, &y, &sched, run.model.label_drop_prob, null, &mut rng)?;
        let mut tape = Tape::new();
        let (loss_var, params) = record_loss(&model, &mut tape, &batch)?;
        let loss = tape.value(loss_var).data()[0] as f64;
        let mut grads = tape.backward(loss_var)?;
        let grads = model.gradients(&mut grads, &params);
        let gnorm = grad_norm(&grads);
        if !loss.is_finite() || !gnorm.is_finite() {
            return Err(DicError::NonFiniteLoss { step, lr: run.lr, grad_norm: gnorm });
        }
        opt.step(model.params_mut(), &grads);
        let row = MetricRow { step, loss, grad_norm: gnorm, wallclock_ms: clock.elapsed().as_secs_f64() * 1e3 };
        if let Some((w, p)) = log.as_mut() {
            writeln!(w, "{}", row.to_csv()).map_err(|e| DicError::io(p.as_path(), e))?;
        }
        if let Some(cb) = opts.on_step.as_mut() {
            cb(&row);
        }
        metrics.push(row);
        let done = step + 1;
        if run.eval_every > 0 && done % run.eval_every == 0 {
            evals.push((done, eval_loss(&model, run, &sched)?));
        }
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done != end {
            save(run, &model, &opt)?;
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| DicError::io(p, e))?;
    }
    save(run, &model, &opt)?;
    Ok(TrainOutcome { model, optimizer: opt, metrics, evals })
}
