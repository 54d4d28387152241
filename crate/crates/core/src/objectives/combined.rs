//! Classification loss, loss weights, the combined objective and the
//! minibatch sampler.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::Reduction;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet, ParamVars, Rng, Tape, Var};

/// Probabilities are clamped here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub smmd: f64,
    pub cl: f64,
    pub str_: f64,
    pub reg: f64,
    pub temperature: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Negatives drawn per edge for the structure term.
    pub negatives_per_edge: usize,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smmd: 1.0,
            cl: 1.0,
            str_: 1.0,
            reg: 1e-4,
            temperature: 0.5,
            epsilon: 0.5,
            batch_size: 256,
            negatives_per_edge: 1,
            reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.smmd, self.cl, self.str_, self.reg];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights {lambdas:?} must be finite and >= 0")));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon={} outside (0, 1)", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step values of every term, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub smmd: f64,
    pub cl: f64,
    #[serde(rename = "str")]
    pub str_: f64,
    /// Squared L2 norm of the trainable parameters (unweighted).
    pub reg: f64,
}

/// `cls + λ1 smmd + λ2 cl + λ3 str + λ4 reg`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    let values = [parts.cls, parts.smmd, parts.cl, parts.str_, parts.reg];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training(format!("non-finite loss part in {parts:?}")));
    }
    Ok(parts.cls + w.smmd * parts.smmd + w.cl * parts.cl + w.str_ * parts.str_ + w.reg * parts.reg)
}

fn check_mask(n: usize, labels: &[u32], classes: usize, mask: &[usize]) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("classification loss over an empty mask".into()));
    }
    for &i in mask {
        if i >= n || i >= labels.len() {
            return Err(Error::Contract(format!("mask node {i} out of range")));
        }
        if labels[i] as usize >= classes {
            return Err(Error::Contract(format!("label {} out of range", labels[i])));
        }
    }
    Ok(())
}

/// Mean `-log p_{i, y_i}` over `mask`.
pub fn classification_tape(tape: &mut Tape, probs: Var, labels: &[u32], mask: &[usize]) -> Result<Var> {
    let (n, c) = tape.value(probs).shape();
    check_mask(n, labels, c, mask)?;
    let at: Vec<(usize, usize)> = mask.iter().map(|&i| (i, labels[i] as usize)).collect();
    let picked = tape.gather_entries(probs, Rc::new(at));
    let logp = tape.ln(picked, PROB_FLOOR);
    let m = tape.mean(logp);
    Ok(tape.scale(m, -1.0))
}

pub fn classification_loss(probs: &Matrix, labels: &[u32], mask: &[usize]) -> Result<f64> {
    check_mask(probs.rows(), labels, probs.cols(), mask)?;
    let s: f64 = mask
        .iter()
        .map(|&i| -probs[(i, labels[i] as usize)].max(PROB_FLOOR).ln())
        .sum();
    Ok(s / mask.len() as f64)
}

/// Squared L2 norm of every trainable parameter, on the tape.
pub fn param_sq_norm_tape(tape: &mut Tape, params: &ParamSet, vars: &ParamVars) -> Var {
    let mut total = tape.constant(Matrix::scalar(0.0));
    for (name, _) in params.trainable() {
        let v = vars.get(name);
        let sq = tape.mul(v, v);
        let s = tape.sum(sq);
        total = tape.add(total, s);
    }
    total
}

/// Uniform samples without replacement of size `min(b, n)` from the target
/// and source index ranges, each returned sorted.
pub fn sample_batch(n_t: usize, n_s: usize, b: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut draw = |n: usize| {
        let mut idx = if b >= n {
            (0..n).collect()
        } else {
            rng.sample_indices(n, b)
        };
        idx.sort_unstable();
        idx
    };
    let t = draw(n_t);
    let s = draw(n_s);
    (t, s)
}
