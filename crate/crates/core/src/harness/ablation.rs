use std::fmt;

use super::train::{eval_loss, train, TrainOptions};
use super::RunConfig;
use crate::error::Result;
use crate::model::Variant;

/// Variants in roadmap order, from the isotropic baseline to DiC.
pub const ROADMAP: [Variant; 4] = [Variant::Isotropic, Variant::IsotropicSkip, Variant::UNetDense, Variant::UNetSparseSkip];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    /// Held-out loss after training.
    pub final_loss: f64,
    /// Mean training loss over the last tenth of the steps.
    pub tail_train_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Trains every variant under the same budget for each seed.
pub fn run_ablation(base: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &seed in seeds {
        for variant in ROADMAP {
            let mut run = base.clone();
            run.seed = seed;
            run.model.variant = variant;
            run.checkpoint_path = None;
            run.metrics_path = None;
            run.eval_every = 0;
            let out = train(&run, TrainOptions::default())?;
            let tail = (out.metrics.len() / 10).max(1);
            let tail_train_loss = out.metrics[out.metrics.len() - tail..].iter().map(|m| m.loss).sum::<f64>() / tail as f64;
            report.rows.push(AblationRow {
                variant,
                seed,
                params: out.model.num_params(),
                final_loss: eval_loss(&out.model, &run, &run.schedule()?)?,
                tail_train_loss,
            });
        }
    }
    Ok(report)
}

impl AblationReport {
    pub fn loss(&self, variant: Variant, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed).map(|r| r.final_loss)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// Seeds on which `a` ends with a held-out loss no higher than `b`.
    pub fn wins(&self, a: Variant, b: Variant) -> usize {
        self.seeds().into_iter().filter(|&s| matches!((self.loss(a, s), self.loss(b, s)), (Some(x), Some(y)) if x <= y)).count()
    }

    pub fn mean_loss(&self, variant: Variant) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.final_loss).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeds = self.seeds();
        write!(f, "{:<16} {:>9} {:>10}", "variant", "params", "mean_loss")?;
        for s in &seeds {
            write!(f, " {:>10}", format!("seed{s}"))?;
        }
        writeln!(f)?;
        for v in ROADMAP {
            let Some(row) = self.rows.iter().find(|r| r.variant == v) else { continue };
            write!(f, "{:<16} {:>9} {:>10.5}", v.label(), row.params, self.mean_loss(v))?;
            for &s in &seeds {
                write!(f, " {:>10.5}", self.loss(v, s).unwrap_or(f64::NAN))?;
            }
            writeln!(f)?;
        }
        let pairs = [(Variant::UNetSparseSkip, Variant::UNetDense), (Variant::UNetDense, Variant::IsotropicSkip), (Variant::IsotropicSkip, Variant::Isotropic), (Variant::UNetSparseSkip, Variant::Isotropic)];
        for (a, b) in pairs {
            writeln!(f, "{} <= {}: {}/{} seeds", a.label(), b.label(), self.wins(a, b), seeds.len())?;
        }
        Ok(())
    }
}
