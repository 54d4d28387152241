use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{Gradients, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (coupled weight decay).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter.
    ///
    /// Frozen parameters are left untouched even if `grads` carries an entry
    /// for them. A trainable parameter without a gradient, or a gradient of
    /// the wrong shape, is a contract error and nothing is updated.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.value.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        for (name, _) in params.trainable() {
            if !grads.contains_key(name) {
                return Err(Error::Contract(format!("missing gradient for trainable {name}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = &grads[name];
            let (r, c) = p.value.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let theta = p.value.data_mut();
            for k in 0..theta.len() {
                let gk = g.data()[k] + weight_decay * theta[k];
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
