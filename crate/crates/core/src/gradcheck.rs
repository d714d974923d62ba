//! Central finite-difference checks of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err < tol)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `loss` with respect to every tensor in `inputs`, at up to `coords` sampled
/// coordinates per tensor.
pub fn check<F>(names: &[String], inputs: &[Tensor<f64>], coords: usize, h: f64, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = loss(&mut tape, &vars)?;
        let value = tape.value(out).data()[0];
        if !grad {
            return Ok((value, None));
        }
        let mut g = tape.backward(out)?;
        Ok((value, Some(vars.iter().map(|&v| g.take(v).expect("leaf gradient")).collect())))
    };
    let (_, analytic) = eval(inputs, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks = sample(&mut rng, n, coords.min(n)).into_vec();
        for idx in picks {
            let orig = input.data()[idx];
            work[ti].data_mut()[idx] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work[ti].data_mut()[idx] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[idx];
            report.entries.push(GradCheckEntry {
                tensor: names.get(ti).cloned().unwrap_or_else(|| format!("input{ti}")),
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            });
        }
    }
    Ok(report)
}
