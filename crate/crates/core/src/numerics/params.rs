//! Named parameter collections, gradient evaluation and finite-difference
//! checking.

use std::collections::BTreeMap;

use super::autodiff::{Tape, Var};
use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub frozen: bool,
}

/// Ordered map from parameter name to value plus freeze tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

pub type Gradients = BTreeMap<String, Matrix>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, frozen: bool) {
        self.entries.insert(name.into(), Param { value, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter().filter(|(_, p)| !p.frozen)
    }

    pub fn count_entries(&self, frozen: Option<bool>) -> usize {
        self.entries
            .values()
            .filter(|p| frozen.is_none_or(|f| p.frozen == f))
            .map(|p| p.value.len())
            .sum()
    }

    /// Squared L2 norm over trainable entries only.
    pub fn trainable_sq_norm(&self) -> f64 {
        self.trainable().map(|(_, p)| p.value.sum_squares()).sum()
    }
}

/// Tape handles for every parameter of a [`ParamSet`].
#[derive(Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Which parameters become differentiable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Every parameter, frozen or not.
    All,
    TrainableOnly,
}

pub fn place_params(tape: &mut Tape, params: &ParamSet, scope: GradScope) -> ParamVars {
    let vars = params
        .iter()
        .map(|(name, p)| {
            let differentiable = scope == GradScope::All || !p.frozen;
            let v = if differentiable {
                tape.param(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            (name.clone(), v)
        })
        .collect();
    ParamVars { vars }
}

/// Evaluates `loss_fn` on a fresh tape and returns the loss together with the
/// gradient of every parameter in scope.
pub fn grad_of<F>(params: &ParamSet, scope: GradScope, mut loss_fn: F) -> Result<(f64, Gradients)>
where
    F: FnMut(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = place_params(&mut tape, params, scope);
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Training(format!("loss evaluated to {value}")));
    }
    let mut adj = tape.backward(loss);
    let mut grads = Gradients::new();
    for (name, p) in params.iter() {
        if scope == GradScope::TrainableOnly && p.frozen {
            continue;
        }
        let v = vars.get(name);
        let g = adj
            .take(v)
            .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()));
        grads.insert(name.clone(), g);
    }
    Ok((value, grads))
}

/// Loss value only.
pub fn eval_loss<F>(params: &ParamSet, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = place_params(&mut tape, params, GradScope::TrainableOnly);
    let loss = loss_fn(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    /// Max of `|analytic - numeric| / max(1, |numeric|)` per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub max_deviation: f64,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }
}

pub const FD_STEP: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss_fn` for every
/// parameter that has an analytic entry. `params` is not modified.
pub fn compare_with_finite_differences<F>(
    params: &ParamSet,
    analytic: &Gradients,
    h: f64,
    mut loss_fn: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut probe = params.clone();
    let mut report = FdReport::default();
    for (name, g) in analytic {
        let base = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if base.value.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} differs from parameter {name} {:?}",
                g.shape(),
                base.value.shape()
            )));
        }
        let mut worst: f64 = 0.0;
        for k in 0..base.value.len() {
            let orig = base.value.data()[k];
            probe.value_mut(name).unwrap().data_mut()[k] = orig + h;
            let up = eval_loss(&probe, &mut loss_fn)?;
            probe.value_mut(name).unwrap().data_mut()[k] = orig - h;
            let down = eval_loss(&probe, &mut loss_fn)?;
            probe.value_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let dev = (g.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(dev);
        }
        report.max_deviation = report.max_deviation.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}

/// Analytic gradients (all parameters) checked against central differences.
pub fn finite_diff_check<F>(params: &ParamSet, h: f64, mut loss_fn: F) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &ParamVars) -> Result<Var>,
{
    let (_, grads) = grad_of(params, GradScope::All, &mut loss_fn)?;
    compare_with_finite_differences(params, &grads, h, loss_fn)
}
