//! Random instances in the feature-major GNN form
//! `H^l = ReLU(W^l H^{l-1} P + b^l 1^T)` with square `D x D` weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::{sym_norm_adj, Graph};
use crate::numerics::linalg::svd;
use crate::numerics::{Matrix, Rng};

/// `LR_r(W)`: the sum of the top `r` singular triplets.
pub fn best_rank_r(w: &Matrix, r: usize) -> Result<Matrix> {
    rank_window(w, 0, r)
}

/// Sum of singular triplets `from..to` (0-based, clipped to the rank).
pub(crate) fn rank_window(w: &Matrix, from: usize, to: usize) -> Result<Matrix> {
    let s = svd(w)?;
    let k = s.sigma.len();
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for t in from.min(k)..to.min(k) {
        for i in 0..w.rows() {
            let a = s.u[(i, t)] * s.sigma[t];
            if a == 0.0 {
                continue;
            }
            for j in 0..w.cols() {
                out[(i, j)] += a * s.v[(j, t)];
            }
        }
    }
    Ok(out)
}

/// `σ_k` (1-based), zero beyond the matrix dimension.
pub fn singular_value(w: &Matrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("singular values are indexed from 1".into()));
    }
    let s = svd(w)?;
    Ok(s.sigma.get(k - 1).copied().unwrap_or(0.0))
}

/// Contiguous blocks of `M = floor(L / L_bar)` layers (0-based layer
/// indices); the last block absorbs the remainder.
pub fn make_partition(l: usize, l_bar: usize) -> Result<Vec<Vec<usize>>> {
    if l_bar == 0 || l_bar > l {
        return Err(Error::InvalidInput(format!(
            "partition needs 1 <= L_bar <= L, got L={l}, L_bar={l_bar}"
        )));
    }
    let m = l / l_bar;
    Ok((0..l_bar)
        .map(|i| {
            let end = if i + 1 == l_bar { l } else { (i + 1) * m };
            (i * m..end).collect()
        })
        .collect())
}

/// Feature-major forward pass; `biases[l]` is `D x 1`.
pub fn gnn_forward(x: &Matrix, weights: &[Matrix], biases: &[Matrix], p: &Matrix) -> Matrix {
    let mut h = x.clone();
    for (w, b) in weights.iter().zip(biases) {
        let mut pre = w.matmul(&h).matmul(p);
        for i in 0..pre.rows() {
            let bi = b[(i, 0)];
            for v in pre.row_mut(i) {
                *v += bi;
            }
        }
        h = pre.map(|v| v.max(0.0));
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationKind {
    /// Erdős–Rényi graph with edge probability 0.4.
    RandomGraph,
    /// Random disjoint union of cliques; its normalised adjacency is
    /// idempotent with unit column sums.
    CliqueUnion,
}

/// Symmetric-normalised adjacency (with self-loops) of a random graph.
pub fn random_propagation(n: usize, kind: PropagationKind, rng: &mut Rng) -> Result<Matrix> {
    let mut edges = Vec::new();
    match kind {
        PropagationKind::RandomGraph => {
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.bernoulli(0.4) {
                        edges.push((u as u32, v as u32));
                    }
                }
            }
        }
        PropagationKind::CliqueUnion => {
            let groups = 1 + rng.below(3);
            let member: Vec<usize> = (0..n).map(|_| rng.below(groups)).collect();
            for u in 0..n {
                for v in (u + 1)..n {
                    if member[u] == member[v] {
                        edges.push((u as u32, v as u32));
                    }
                }
            }
        }
    }
    let g = Graph::new(n, edges, Matrix::zeros(n, 1), vec![0; n], 1)?;
    Ok(sym_norm_adj(&g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceSpec {
    pub d: usize,
    pub nodes: usize,
    pub frozen_layers: usize,
    pub target_layers: usize,
    pub rank: usize,
    /// Weights are i.i.d. Gaussian with this standard deviation over sqrt(D).
    pub weight_scale: f64,
    pub bias_scale: f64,
    /// `None` picks clique unions whenever a block spans several layers.
    pub propagation: Option<PropagationKind>,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            d: 4,
            nodes: 8,
            frozen_layers: 4,
            target_layers: 2,
            rank: 1,
            weight_scale: 1.0,
            bias_scale: 0.5,
            propagation: None,
        }
    }
}

impl InstanceSpec {
    pub fn block_size(&self) -> usize {
        self.frozen_layers / self.target_layers.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.nodes == 0 {
            return Err(Error::Config("theory instances need D >= 1 and N >= 1".into()));
        }
        make_partition(self.frozen_layers, self.target_layers)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub target_w: Vec<Matrix>,
    pub target_b: Vec<Matrix>,
    pub frozen_w: Vec<Matrix>,
    pub frozen_b: Vec<Matrix>,
    pub rank: usize,
    pub prop: Matrix,
}

impl TheoryInstance {
    pub fn random(spec: &InstanceSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.d;
        let std = spec.weight_scale / (d as f64).sqrt();
        let mats = |count: usize, rows: usize, cols: usize, s: f64, rng: &mut Rng| {
            (0..count)
                .map(|_| rng.gaussian_matrix(rows, cols, s))
                .collect::<Vec<_>>()
        };
        let target_w = mats(spec.target_layers, d, d, std, rng);
        let target_b = mats(spec.target_layers, d, 1, spec.bias_scale, rng);
        let frozen_w = mats(spec.frozen_layers, d, d, std, rng);
        let frozen_b = mats(spec.frozen_layers, d, 1, spec.bias_scale, rng);
        let kind = spec.propagation.unwrap_or(if spec.block_size() > 1 {
            PropagationKind::CliqueUnion
        } else {
            PropagationKind::RandomGraph
        });
        let prop = random_propagation(spec.nodes, kind, rng)?;
        Ok(Self {
            target_w,
            target_b,
            frozen_w,
            frozen_b,
            rank: spec.rank,
            prop,
        })
    }

    pub fn d(&self) -> usize {
        self.frozen_w[0].rows()
    }

    pub fn nodes(&self) -> usize {
        self.prop.rows()
    }

    pub fn frozen_layers(&self) -> usize {
        self.frozen_w.len()
    }

    pub fn target_layers(&self) -> usize {
        self.target_w.len()
    }

    pub fn block_size(&self) -> usize {
        self.frozen_layers() / self.target_layers()
    }

    pub fn partition(&self) -> Result<Vec<Vec<usize>>> {
        make_partition(self.frozen_layers(), self.target_layers())
    }

    /// `W^{last} ... W^{first}` over each block.
    pub fn block_products(&self) -> Result<Vec<Matrix>> {
        let d = self.d();
        Ok(self
            .partition()?
            .iter()
            .map(|block| {
                block
                    .iter()
                    .fold(Matrix::identity(d), |acc, &l| self.frozen_w[l].matmul(&acc))
            })
            .collect())
    }

    pub fn target_forward(&self, x: &Matrix) -> Matrix {
        gnn_forward(x, &self.target_w, &self.target_b, &self.prop)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let sq = |m: &Matrix| m.shape() == (d, d);
        let col = |m: &Matrix| m.shape() == (d, 1);
        if self.target_w.is_empty()
            || self.target_w.len() != self.target_b.len()
            || self.frozen_w.len() != self.frozen_b.len()
            || !self.target_w.iter().chain(&self.frozen_w).all(sq)
            || !self.target_b.iter().chain(&self.frozen_b).all(col)
            || self.prop.rows() != self.prop.cols()
        {
            return Err(Error::Contract("inconsistent theory instance shapes".into()));
        }
        make_partition(self.frozen_layers(), self.target_layers())?;
        Ok(())
    }
}

/// Standard Gaussian `D x N` inputs.
pub fn sample_inputs(d: usize, n: usize, count: usize, rng: &mut Rng) -> Vec<Matrix> {
    (0..count).map(|_| rng.gaussian_matrix(d, n, 1.0)).collect()
}
