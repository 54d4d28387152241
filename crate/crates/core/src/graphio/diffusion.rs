//! Symmetric adjacency normalisation and personalized-PageRank diffusion.

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::numerics::{linalg::Lu, Matrix};

/// `D^{-1/2} A D^{-1/2}`, optionally with self-loops added to `A` first.
/// Isolated nodes without a self-loop get an all-zero row and column.
pub fn normalized_adjacency(g: &Graph, self_loops: bool) -> Matrix {
    let n = g.n();
    let mut deg: Vec<f64> = vec![if self_loops { 1.0 } else { 0.0 }; n];
    for &(u, v) in g.edges() {
        deg[u as usize] += 1.0;
        deg[v as usize] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut p = Matrix::zeros(n, n);
    if self_loops {
        for i in 0..n {
            p[(i, i)] = inv_sqrt[i] * inv_sqrt[i];
        }
    }
    for &(u, v) in g.edges() {
        let (u, v) = (u as usize, v as usize);
        let w = inv_sqrt[u] * inv_sqrt[v];
        p[(u, v)] = w;
        p[(v, u)] = w;
    }
    p
}

/// Propagation matrix `D~^{-1/2} (A + I) D~^{-1/2}`.
pub fn sym_norm_adj(g: &Graph) -> Matrix {
    normalized_adjacency(g, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionMode {
    ClosedForm,
    TruncatedSeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Teleport probability in (0, 1).
    pub alpha: f64,
    pub mode: DiffusionMode,
    pub truncation_order: usize,
    pub self_loops: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            mode: DiffusionMode::ClosedForm,
            truncation_order: 200,
            self_loops: true,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha={} must lie in (0, 1)", self.alpha)));
        }
        if self.truncation_order == 0 {
            return Err(Error::Config("truncation_order must be at least 1".into()));
        }
        Ok(())
    }
}

/// PPR diffusion `S = alpha (I - (1 - alpha) T)^{-1}` with `T` the
/// symmetric normalisation, or its power series truncated after
/// `truncation_order` terms.
pub fn ppr_diffusion(g: &Graph, cfg: &DiffusionConfig) -> Result<Matrix> {
    cfg.validate()?;
    let t = normalized_adjacency(g, cfg.self_loops);
    let n = g.n();
    let alpha = cfg.alpha;
    let s = match cfg.mode {
        DiffusionMode::ClosedForm => {
            let mut m = t.scale(-(1.0 - alpha));
            for i in 0..n {
                m[(i, i)] += 1.0;
            }
            let lu = Lu::new(&m).map_err(|e| Error::Numeric(format!("PPR system: {e}")))?;
            lu.solve(&Matrix::identity(n)).scale(alpha)
        }
        DiffusionMode::TruncatedSeries => {
            let mut term = Matrix::identity(n).scale(alpha);
            let mut acc = term.clone();
            for _ in 0..cfg.truncation_order {
                term = t.matmul(&term).scale(1.0 - alpha);
                acc.add_assign(&term);
            }
            acc
        }
    };
    if !s.is_finite() {
        return Err(Error::Numeric("PPR diffusion produced non-finite values".into()));
    }
    // Clamp round-off negatives; exact S is entrywise non-negative.
    Ok(s.map(|v| v.max(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::synth::{gen_synth, SynthSpec};

    fn pair() -> Graph {
        Graph::new(2, vec![(0, 1)], Matrix::zeros(2, 1), vec![0, 0], 1).unwrap()
    }

    #[test]
    fn isolated_node_self_loop() {
        let g = Graph::new(1, vec![], Matrix::zeros(1, 1), vec![0], 1).unwrap();
        assert_eq!(sym_norm_adj(&g).data(), &[1.0]);
    }

    #[test]
    fn two_node_normalisation() {
        let p = sym_norm_adj(&pair());
        for v in p.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn two_node_ppr_without_self_loops() {
        let cfg = DiffusionConfig {
            self_loops: false,
            ..DiffusionConfig::default()
        };
        let s = ppr_diffusion(&pair(), &cfg).unwrap();
        // 0.15 / (1 - 0.85^2) * [[1, 0.85], [0.85, 1]]
        let d = 0.15 / (1.0 - 0.85 * 0.85);
        assert!((s[(0, 0)] - d).abs() < 1e-12);
        assert!((s[(0, 1)] - 0.85 * d).abs() < 1e-12);
        assert!((s[(0, 0)] - 0.540_540_540_540_540_5).abs() < 1e-12);
        assert!((s[(1, 0)] - 0.459_459_459_459_459_5).abs() < 1e-12);
    }

    #[test]
    fn larger_alpha_concentrates_on_diagonal() {
        let mk = |alpha| DiffusionConfig {
            alpha,
            self_loops: false,
            ..DiffusionConfig::default()
        };
        let lo = ppr_diffusion(&pair(), &mk(0.15)).unwrap();
        let hi = ppr_diffusion(&pair(), &mk(0.5)).unwrap();
        assert!(hi[(0, 0)] > lo[(0, 0)]);
    }

    #[test]
    fn closed_form_matches_series_on_random_graph() {
        let g = gen_synth(&SynthSpec {
            nodes_per_class: 15,
            p_intra: 0.3,
            p_inter: 0.05,
            seed: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let cf = ppr_diffusion(&g, &DiffusionConfig::default()).unwrap();
        let series = ppr_diffusion(
            &g,
            &DiffusionConfig {
                mode: DiffusionMode::TruncatedSeries,
                ..DiffusionConfig::default()
            },
        )
        .unwrap();
        assert!(cf.max_abs_diff(&series) <= 1e-8);
        assert!(cf.is_symmetric(1e-12));
        assert!(cf.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn alpha_bounds() {
        for alpha in [0.0, 1.0, -0.1] {
            let cfg = DiffusionConfig {
                alpha,
                ..DiffusionConfig::default()
            };
            assert!(ppr_diffusion(&pair(), &cfg).is_err());
        }
    }
}
