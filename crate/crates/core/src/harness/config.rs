use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{DicError, Result};
use crate::model::{parse_num, ModelConfig};

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Pixel noise added to every toy sample.
    pub noise_sigma: f64,
    pub checkpoint_path: Option<PathBuf>,
    /// Save every this many steps (0 saves only at the end).
    pub checkpoint_every: u64,
    pub metrics_path: Option<PathBuf>,
    /// Held-out loss every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::dic_micro(),
            seed: 0,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-4,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            steps: 500,
            noise_sigma: 0.1,
            checkpoint_path: None,
            checkpoint_every: 0,
            metrics_path: None,
            eval_every: 0,
            eval_size: 256,
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Canonical `key=value` pairs in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![("seed".into(), self.seed.to_string())];
        kv.extend(self.model.to_kv());
        let rest = [
            ("diffusion.beta_start", self.beta_start.to_string()),
            ("diffusion.beta_end", self.beta_end.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.adam_beta1", self.adam_beta1.to_string()),
            ("train.adam_beta2", self.adam_beta2.to_string()),
            ("train.adam_eps", self.adam_eps.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.steps", self.steps.to_string()),
            ("data.noise_sigma", self.noise_sigma.to_string()),
            ("checkpoint.path", opt_path(&self.checkpoint_path)),
            ("checkpoint.every", self.checkpoint_every.to_string()),
            ("metrics.path", opt_path(&self.metrics_path)),
            ("eval.every", self.eval_every.to_string()),
            ("eval.size", self.eval_size.to_string()),
        ];
        kv.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        kv
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Applies one override. `model.preset` replaces the whole model section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "diffusion.beta_start" => self.beta_start = parse_num(key, value)?,
            "diffusion.beta_end" => self.beta_end = parse_num(key, value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_num(key, value)?,
            "train.adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "train.adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "train.adam_eps" => self.adam_eps = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.steps" => self.steps = parse_num(key, value)?,
            "data.noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "checkpoint.path" => self.checkpoint_path = parse_path(value),
            "checkpoint.every" => self.checkpoint_every = parse_num(key, value)?,
            "metrics.path" => self.metrics_path = parse_path(value),
            "eval.every" => self.eval_every = parse_num(key, value)?,
            "eval.size" => self.eval_size = parse_num(key, value)?,
            _ => return Err(DicError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DicError::config(format!("line {}", lineno + 1), format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rc = Self::default();
        rc.apply_text(text)?;
        rc.validate()?;
        Ok(rc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DicError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        let check = |ok: bool, field: &str, reason: &str| if ok { Ok(()) } else { Err(DicError::config(field, reason)) };
        check(self.lr > 0.0 && self.lr.is_finite(), "train.lr", "must be positive")?;
        check(self.weight_decay >= 0.0, "train.weight_decay", "must be non-negative")?;
        check((0.0..1.0).contains(&self.adam_beta1), "train.adam_beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "train.adam_beta2", "must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "train.adam_eps", "must be positive")?;
        check(self.batch_size > 0, "train.batch_size", "must be positive")?;
        check(self.noise_sigma >= 0.0, "data.noise_sigma", "must be non-negative")?;
        check(self.eval_size > 0, "eval.size", "must be positive")?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.model.timesteps, self.beta_start, self.beta_end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut rc = RunConfig::default();
        rc.lr = 2.5e-3;
        rc.checkpoint_path = Some("out/ckpt.dic".into());
        rc.model.variant = crate::model::Variant::UNetDense;
        let back = RunConfig::parse(&rc.to_text()).unwrap();
        assert_eq!(back, rc);
    }

    #[test]
    fn comments_and_errors() {
        let rc = RunConfig::parse("# header\nseed = 7 # trailing\n\nmodel.preset=DiC-S\n").unwrap();
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.model.base_channels, 96);
        assert!(matches!(RunConfig::parse("train.learning_rate=1"), Err(DicError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("train.lr=fast"), Err(DicError::Config { .. })));
        assert!(RunConfig::parse("just words").is_err());
        assert!(matches!(RunConfig::parse("train.lr=-1"), Err(DicError::Config { field, .. }) if field == "train.lr"));
    }
}
