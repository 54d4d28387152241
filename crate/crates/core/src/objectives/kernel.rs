//! RBF kernel, MMD and the structure-weighted SMMD.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::autodiff::pairwise_sq_dist;
use crate::numerics::{Matrix, Tape, Var};

/// Diffusion entries below this are floored before computing `γ`.
pub const S_MIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled rows, recomputed per call.
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("kernel bandwidth {s} must be positive")));
            }
        }
        Ok(())
    }

    /// Bandwidth for a pair of row sets.
    pub fn sigma(&self, a: &Matrix, b: &Matrix) -> f64 {
        match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => median_bandwidth(a, b),
        }
    }
}

/// `exp(-|a - b|^2 / (2 sigma^2))`.
pub fn rbf_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "rbf_kernel dimension mismatch");
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Median Euclidean distance over distinct pairs of the pooled rows of `a`
/// and `b`. Returns 1 when there are fewer than two rows or the median is 0.
pub fn median_bandwidth(a: &Matrix, b: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let s: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Kernel matrix between the rows of `a` and `b`.
pub fn kernel_matrix(a: &Matrix, b: &Matrix, sigma: f64) -> Matrix {
    let c = -1.0 / (2.0 * sigma * sigma);
    pairwise_sq_dist(a, b).map(|d| (d * c).exp())
}

/// `γ = log(1 + 1/S)` elementwise with `S` floored at [`S_MIN`].
pub fn smmd_gamma(s: &Matrix) -> Matrix {
    s.map(|v| (1.0 + 1.0 / v.max(S_MIN)).ln())
}

fn check_sets(zt: &Matrix, xs: &Matrix) -> Result<()> {
    if zt.rows() == 0 || xs.rows() == 0 {
        return Err(Error::InvalidInput("MMD needs non-empty sample sets".into()));
    }
    if zt.cols() != xs.cols() {
        return Err(Error::Contract(format!(
            "MMD sets have dimensions {} and {}",
            zt.cols(),
            xs.cols()
        )));
    }
    Ok(())
}

/// Biased MMD estimate: mean k_tt + mean k_ss - 2 mean k_ts.
pub fn mmd(zt: &Matrix, xs: &Matrix, cfg: &KernelConfig) -> Result<f64> {
    check_sets(zt, xs)?;
    let sigma = cfg.sigma(zt, xs);
    Ok(kernel_matrix(zt, zt, sigma).mean() + kernel_matrix(xs, xs, sigma).mean()
        - 2.0 * kernel_matrix(zt, xs, sigma).mean())
}

/// SMMD with the target-target term weighted by `gamma` and normalised by
/// its sum. `gamma` is indexed like the rows of `zt`.
pub fn smmd(zt: &Matrix, xs: &Matrix, gamma: &Matrix, cfg: &KernelConfig) -> Result<f64> {
    check_sets(zt, xs)?;
    check_gamma(gamma, zt.rows())?;
    let sigma = cfg.sigma(zt, xs);
    let ktt = kernel_matrix(zt, zt, sigma);
    let first = ktt.hadamard(gamma).sum() / gamma.sum();
    Ok(first + kernel_matrix(xs, xs, sigma).mean() - 2.0 * kernel_matrix(zt, xs, sigma).mean())
}

fn check_gamma(gamma: &Matrix, n: usize) -> Result<()> {
    if gamma.shape() != (n, n) {
        return Err(Error::Contract(format!(
            "gamma is {:?}, expected {n}x{n}",
            gamma.shape()
        )));
    }
    if !(gamma.sum() > 0.0) {
        return Err(Error::InvalidInput("gamma weights must have a positive sum".into()));
    }
    Ok(())
}

/// Differentiable SMMD (or MMD when `gamma` is `None`) of the target rows
/// `zt` against constant source rows `xs`. The bandwidth is computed from
/// the current values and held constant.
pub fn smmd_tape(
    tape: &mut Tape,
    zt: Var,
    xs: &Matrix,
    gamma: Option<&Matrix>,
    cfg: &KernelConfig,
) -> Result<Var> {
    let z = tape.value(zt);
    check_sets(z, xs)?;
    let n = z.rows();
    if let Some(g) = gamma {
        check_gamma(g, n)?;
    }
    let sigma = cfg.sigma(z, xs);
    let c = -1.0 / (2.0 * sigma * sigma);
    let kss = kernel_matrix(xs, xs, sigma).mean();

    let xs_v = tape.constant(xs.clone());
    let dtt = tape.sq_dist(zt, zt);
    let dtt = tape.scale(dtt, c);
    let ktt = tape.exp(dtt);
    let weights = match gamma {
        Some(g) => g.scale(1.0 / g.sum()),
        None => Matrix::filled(n, n, 1.0 / (n * n) as f64),
    };
    let wtt = tape.mul_const(ktt, Rc::new(weights));
    let first = tape.sum(wtt);

    let dts = tape.sq_dist(zt, xs_v);
    let dts = tape.scale(dts, c);
    let kts = tape.exp(dts);
    let cross = tape.mean(kts);
    let cross = tape.scale(cross, -2.0);
    let s = tape.add(first, cross);
    Ok(tape.add_scalar(s, kss))
}
