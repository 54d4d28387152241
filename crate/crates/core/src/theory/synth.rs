//! Adapter synthesis: closed form for single-layer blocks, a constructive
//! block factorisation for longer blocks, and Adam refinement.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::instance::{gnn_forward, rank_window, TheoryInstance};
use crate::error::{Error, Result};
use crate::numerics::linalg::{inverse, rank, svd};
use crate::numerics::{grad_of, AdamConfig, AdamState, GradScope, Matrix, ParamSet, Rng, Tape};

/// Ratio `σ_min / σ_max` below which a matrix is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Tolerance of the numerical rank used by the exactness condition.
pub const RANK_TOL: f64 = 1e-10;

/// Per-layer weight updates and replacement biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapters {
    pub delta: Vec<Matrix>,
    pub bias: Vec<Matrix>,
}

impl Adapters {
    pub fn adapted_weights(&self, inst: &TheoryInstance) -> Vec<Matrix> {
        inst.frozen_w.iter().zip(&self.delta).map(|(w, d)| w.add(d)).collect()
    }

    /// Largest numerical rank over the updates.
    pub fn max_rank(&self) -> Result<usize> {
        let mut r = 0;
        for d in &self.delta {
            r = r.max(rank(d, RANK_TOL)?);
        }
        Ok(r)
    }
}

/// `g(X) = GNN(X; W + ΔW, b̂)`.
pub fn adapted_forward(inst: &TheoryInstance, ad: &Adapters, x: &Matrix) -> Matrix {
    gnn_forward(x, &ad.adapted_weights(inst), &ad.bias, &inst.prop)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Mean of `‖g(X) - ḡ(X)‖_2` over the inputs.
    pub mean_norm: f64,
    /// Largest absolute entry of `g(X) - ḡ(X)` over the inputs.
    pub max_abs: f64,
}

pub fn measure(inst: &TheoryInstance, ad: &Adapters, xs: &[Matrix]) -> Result<Measurement> {
    let mut total = 0.0;
    let mut max_abs: f64 = 0.0;
    for x in xs {
        let diff = adapted_forward(inst, ad, x).sub(&inst.target_forward(x));
        total += crate::numerics::spectral_norm(&diff)?;
        max_abs = max_abs.max(diff.max_abs());
    }
    Ok(Measurement {
        mean_norm: total / xs.len().max(1) as f64,
        max_abs,
    })
}

fn check_conditioning(m: &Matrix, what: &str) -> Result<()> {
    let s = svd(m)?;
    let top = s.sigma[0];
    let bottom = *s.sigma.last().unwrap();
    if !(top > 0.0) || bottom / top < SINGULAR_TOL {
        return Err(Error::Condition(format!(
            "{what} is numerically singular (σ_min/σ_max = {:.3e})",
            if top > 0.0 { bottom / top } else { 0.0 }
        )));
    }
    Ok(())
}

/// `ΔW^l = W̄^l - W^l`, `b̂^l = b̄^l` for one-layer blocks, valid when
/// `R >= rank(W̄^l - W^l)` for every layer.
pub fn synthesize_exact(inst: &TheoryInstance) -> Result<Adapters> {
    inst.validate()?;
    if inst.frozen_layers() != inst.target_layers() {
        return Err(Error::Condition(format!(
            "closed-form synthesis needs L = L_bar, got {} and {}",
            inst.frozen_layers(),
            inst.target_layers()
        )));
    }
    let mut delta = Vec::new();
    for (l, (wb, w)) in inst.target_w.iter().zip(&inst.frozen_w).enumerate() {
        let d = wb.sub(w);
        let r = rank(&d, RANK_TOL)?;
        if r > inst.rank {
            return Err(Error::Condition(format!(
                "layer {l}: rank(W̄ - W) = {r} exceeds adapter rank {}",
                inst.rank
            )));
        }
        delta.push(d);
    }
    Ok(Adapters {
        delta,
        bias: inst.target_b.clone(),
    })
}

fn is_idempotent_stochastic(p: &Matrix) -> bool {
    let sums_ok = p.col_sums().data().iter().all(|c| (c - 1.0).abs() < 1e-9);
    sums_ok && p.matmul(p).max_abs_diff(p) < 1e-9
}

/// Block-wise construction. Within block `i` with layers `l_1..l_m` the
/// residual `LR_{Rm}(W̄^i - Π W)` is split into rank-`R` pieces `Q_k` and
///
/// ```text
/// ΔW_k = (W_m ... W_{k+1})^{-1} Q_k T_{k-1}^{-1},   T_k = (W_k + ΔW_k) T_{k-1}
/// ```
///
/// so that `T_m = Π W + LR_{Rm}(·)`. Intermediate layers get a bias large
/// enough that their ReLU acts as the identity on `inputs`, and the next
/// layer's bias cancels it; this requires `P^2 = P` and `1^T P = 1^T`.
pub fn synthesize_constructive(inst: &TheoryInstance, inputs: &[Matrix]) -> Result<Adapters> {
    inst.validate()?;
    let d = inst.d();
    let p = &inst.prop;
    let blocks = inst.partition()?;
    if blocks.iter().any(|b| b.len() > 1) && !is_idempotent_stochastic(p) {
        return Err(Error::Condition(
            "multi-layer blocks need an idempotent propagation matrix with unit column sums".into(),
        ));
    }
    for (l, w) in inst.frozen_w.iter().enumerate() {
        check_conditioning(w, &format!("frozen W^{}", l + 1))?;
    }
    let ones = Matrix::filled(d, 1, 1.0);
    let mut delta = vec![Matrix::zeros(d, d); inst.frozen_layers()];
    let mut bias = vec![Matrix::zeros(d, 1); inst.frozen_layers()];
    let mut block_inputs: Vec<Matrix> = inputs.to_vec();

    for (i, block) in blocks.iter().enumerate() {
        let m = block.len();
        let prod = block
            .iter()
            .fold(Matrix::identity(d), |acc, &l| inst.frozen_w[l].matmul(&acc));
        let residual = inst.target_w[i].sub(&prod);
        let mut t = Matrix::identity(d);
        let mut prev_shift = 0.0;
        for (k, &l) in block.iter().enumerate() {
            let q = rank_window(&residual, k * inst.rank, (k + 1) * inst.rank)?;
            let after = block[k + 1..]
                .iter()
                .fold(Matrix::identity(d), |acc, &j| inst.frozen_w[j].matmul(&acc));
            let dw = inverse(&after)?.matmul(&q).matmul(&inverse(&t)?);
            let w_adapted = inst.frozen_w[l].add(&dw);
            t = w_adapted.matmul(&t);
            if k + 1 < m {
                check_conditioning(&t, &format!("partial product T_{} of block {}", k + 1, i + 1))?;
            }
            let carry = w_adapted.matmul(&ones).scale(prev_shift);
            bias[l] = if k + 1 == m {
                inst.target_b[i].sub(&carry)
            } else {
                let mut lowest: f64 = 0.0;
                for h in &block_inputs {
                    lowest = lowest.min(t.matmul(h).matmul(p).data().iter().copied().fold(f64::INFINITY, f64::min));
                }
                let shift = -lowest + 1.0;
                let b = ones.scale(shift).sub(&carry);
                prev_shift = shift;
                b
            };
            delta[l] = dw;
        }
        block_inputs = block_inputs
            .iter()
            .map(|h| gnn_forward(h, &[t.clone()], &[inst.target_b[i].clone()], p))
            .collect();
    }
    Ok(Adapters { delta, bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub iters: usize,
    pub lr: f64,
    pub train_samples: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 1e-3,
            train_samples: 32,
        }
    }
}

fn factor_name(kind: &str, l: usize) -> String {
    format!("{kind}.{l}")
}

/// Rank-`R` factors `u v` (feature-major `ΔW = u v`) of the warm start.
fn factorize(ad: &Adapters, r: usize) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for (l, dw) in ad.delta.iter().enumerate() {
        let s = svd(dw)?;
        let d = dw.rows();
        let u = Matrix::from_fn(d, r, |i, t| if t < s.sigma.len() { s.u[(i, t)] * s.sigma[t] } else { 0.0 });
        let v = Matrix::from_fn(r, d, |t, j| if t < s.sigma.len() { s.v[(j, t)] } else { 0.0 });
        ps.insert(factor_name("u", l), u, false);
        ps.insert(factor_name("v", l), v, false);
        ps.insert(factor_name("b", l), ad.bias[l].transpose(), false);
    }
    Ok(ps)
}

fn unfactorize(ps: &ParamSet, layers: usize) -> Adapters {
    let delta = (0..layers)
        .map(|l| ps.value(&factor_name("u", l)).matmul(ps.value(&factor_name("v", l))))
        .collect();
    let bias = (0..layers)
        .map(|l| ps.value(&factor_name("b", l)).transpose())
        .collect();
    Adapters { delta, bias }
}

fn block_diag(p: &Matrix, copies: usize) -> Matrix {
    let n = p.rows();
    let mut out = Matrix::zeros(n * copies, n * copies);
    for c in 0..copies {
        for i in 0..n {
            for j in 0..n {
                out[(c * n + i, c * n + j)] = p[(i, j)];
            }
        }
    }
    out
}

fn stack_node_major(xs: &[Matrix]) -> Matrix {
    let n = xs[0].cols();
    let d = xs[0].rows();
    let mut out = Matrix::zeros(n * xs.len(), d);
    for (s, x) in xs.iter().enumerate() {
        for i in 0..n {
            for j in 0..d {
                out[(s * n + i, j)] = x[(j, i)];
            }
        }
    }
    out
}

/// Refines rank-`R` factors and biases with Adam on the mean squared
/// Frobenius error over `train`, starting from `warm`. Returns whichever of
/// the warm start and the refined adapters has the lower measured error on
/// `eval`.
pub fn synthesize_optimized(
    inst: &TheoryInstance,
    warm: &Adapters,
    eval: &[Matrix],
    cfg: &OptimizeConfig,
    rng: &mut Rng,
) -> Result<(Adapters, Measurement)> {
    let layers = inst.frozen_layers();
    let warm_m = measure(inst, warm, eval)?;
    if cfg.iters == 0 || warm_m.mean_norm == 0.0 {
        return Ok((warm.clone(), warm_m));
    }
    let train = super::instance::sample_inputs(inst.d(), inst.nodes(), cfg.train_samples.max(1), rng);
    let x = Rc::new(stack_node_major(&train));
    let target = Rc::new(stack_node_major(
        &train.iter().map(|x| inst.target_forward(x)).collect::<Vec<_>>(),
    ));
    let p_big = Rc::new(block_diag(&inst.prop, train.len()));
    let frozen_t: Vec<Rc<Matrix>> = inst.frozen_w.iter().map(|w| Rc::new(w.transpose())).collect();
    let scale = 1.0 / train.len() as f64;

    let mut params = factorize(warm, inst.rank.max(1))?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    for _ in 0..cfg.iters {
        let (_, grads) = grad_of(&params, GradScope::TrainableOnly, |tape: &mut Tape, vars| {
            let p = tape.constant_rc(p_big.clone());
            let mut h = tape.constant_rc(x.clone());
            for l in 0..layers {
                let hp = tape.matmul(p, h);
                let wt = tape.constant_rc(frozen_t[l].clone());
                let base = tape.matmul(hp, wt);
                let t = tape.matmul_t(hp, vars.get(&factor_name("v", l)));
                let low = tape.matmul_t(t, vars.get(&factor_name("u", l)));
                let pre = tape.add(base, low);
                let pre = tape.add_row(pre, vars.get(&factor_name("b", l)));
                h = tape.relu(pre);
            }
            let y = tape.constant_rc(target.clone());
            let diff = tape.sub(h, y);
            let sq = tape.mul(diff, diff);
            let s = tape.sum(sq);
            Ok(tape.scale(s, scale))
        })?;
        adam.step(&mut params, &grads)?;
    }
    let refined = unfactorize(&params, layers);
    let refined_m = measure(inst, &refined, eval)?;
    Ok(if refined_m.mean_norm < warm_m.mean_norm {
        (refined, refined_m)
    } else {
        (warm.clone(), warm_m)
    })
}
