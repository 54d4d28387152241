//! Planted-partition graphs with Gaussian class-conditional features and an
//! optional rotation/shift of the feature space.

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub nodes_per_class: usize,
    pub classes: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation of the within-class noise.
    pub noise: f64,
    /// Rotation applied in every coordinate plane (0,1), (2,3), ...
    pub rotation_deg: f64,
    /// Magnitude of a shift along the normalised all-ones direction.
    pub shift: f64,
    /// Seed of the class-mean prototypes. Graphs that should share a
    /// feature "concept" (source and target) must share this seed.
    pub prototype_seed: u64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            nodes_per_class: 50,
            classes: 2,
            p_intra: 0.1,
            p_inter: 0.02,
            feature_dim: 16,
            separation: 1.5,
            noise: 1.0,
            rotation_deg: 0.0,
            shift: 0.0,
            prototype_seed: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1]")));
            }
        }
        if self.classes == 0 || self.nodes_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "classes, nodes_per_class and feature_dim must be positive".into(),
            ));
        }
        if self.noise < 0.0 || !self.separation.is_finite() || !self.shift.is_finite() {
            return Err(Error::Config("invalid feature distribution parameters".into()));
        }
        Ok(())
    }

    /// Class mean vectors (classes x d).
    pub fn class_means(&self) -> Matrix {
        let mut rng = Rng::derive(self.prototype_seed, 0x5eed);
        let mut means = rng.gaussian_matrix(self.classes, self.feature_dim, 1.0);
        for c in 0..self.classes {
            let row = means.row_mut(c);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row {
                *v *= self.separation / norm;
            }
        }
        means
    }

    /// Applies the rotation and shift to a feature matrix.
    pub fn transform(&self, x: &Matrix) -> Matrix {
        let theta = self.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let d = x.cols();
        let shift = self.shift / (d as f64).sqrt();
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mut k = 0;
            while k + 1 < d {
                let (a, b) = (row[k], row[k + 1]);
                row[k] = c * a - s * b;
                row[k + 1] = s * a + c * b;
                k += 2;
            }
            for v in row.iter_mut() {
                *v += shift;
            }
        }
        out
    }
}

pub fn gen_synth(spec: &SynthSpec) -> Result<Graph> {
    spec.validate()?;
    let n = spec.nodes_per_class * spec.classes;
    let labels: Vec<u32> = (0..n).map(|i| (i / spec.nodes_per_class) as u32).collect();
    let mut rng = Rng::new(spec.seed);

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                spec.p_intra
            } else {
                spec.p_inter
            };
            if rng.bernoulli(p) {
                edges.push((u as u32, v as u32));
            }
        }
    }

    let means = spec.class_means();
    let raw = Matrix::from_fn(n, spec.feature_dim, |i, j| {
        means[(labels[i] as usize, j)] + spec.noise * rng.normal()
    });
    let features = spec.transform(&raw);
    Graph::new(n, edges, features, labels, spec.classes)
}
