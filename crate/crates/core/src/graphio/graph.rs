use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Disjoint train/validation/test node sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::Contract(format!("split index {i} out of range for {n} nodes")));
            }
            if seen[i] {
                return Err(Error::Contract(format!("node {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Undirected node-classification graph.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted and deduplicated.
/// Self-loops are never stored; they are added when the propagation matrix
/// is built.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(u32, u32)>,
    features: Matrix,
    labels: Vec<u32>,
    classes: usize,
    splits: Option<Splits>,
}

impl Graph {
    /// Builds a graph, canonicalising the edge list. Edges given in either
    /// direction are merged; self-loops are dropped.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (u32, u32)>,
        features: Matrix,
        labels: Vec<u32>,
        classes: usize,
    ) -> Result<Self> {
        if features.rows() != n {
            return Err(Error::Contract(format!(
                "feature matrix has {} rows for {n} nodes",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        features.check_finite("node features")?;
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u as usize >= n || v as usize >= n {
                return Err(Error::Contract(format!("edge ({u}, {v}) out of range")));
            }
            if u == v {
                continue;
            }
            set.insert((u.min(v), u.max(v)));
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
            features,
            labels,
            classes,
            splits: None,
        })
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate(self.n)?;
        self.splits = Some(splits);
        Ok(self)
    }

    pub fn set_splits(&mut self, splits: Option<Splits>) -> Result<()> {
        if let Some(s) = &splits {
            s.validate(self.n)?;
        }
        self.splits = splits;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    /// Adjacency lists (both directions), sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u as usize].push(v as usize);
            adj[v as usize].push(u as usize);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v) as u32, u.max(v) as u32);
        self.edges.binary_search(&key).is_ok()
    }

    /// Fraction of edges joining same-label endpoints; 1.0 for an edgeless graph.
    pub fn edge_homophily(&self) -> f64 {
        if self.edges.is_empty() {
            return 1.0;
        }
        let same = self
            .edges
            .iter()
            .filter(|&&(u, v)| self.labels[u as usize] == self.labels[v as usize])
            .count();
        same as f64 / self.edges.len() as f64
    }

    pub fn nodes_of_class(&self, c: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.label(i) == c).collect()
    }

    /// Copy with different node features (same structure and labels).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.n {
            return Err(Error::Contract("feature row count mismatch".into()));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    /// Copy restricted to the given edge subset (used for edge-drop views).
    pub fn with_edges(&self, edges: Vec<(u32, u32)>) -> Self {
        let mut g = self.clone();
        g.edges = edges;
        g
    }
}
