//! Homophily regulariser on predicted label distributions.

use std::rc::Rc;

use super::Reduction;
use crate::error::{Error, Result};
use crate::graphio::Graph;
use crate::numerics::{Matrix, Rng, Tape, Var};

/// Ordered node pairs entering the regulariser.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSample {
    /// Both orientations of every edge.
    pub linked: Vec<(usize, usize)>,
    /// `(u, w)` with `w` not adjacent to `u`.
    pub unlinked: Vec<(usize, usize)>,
}

/// All edges plus `per_edge` uniformly drawn non-neighbours of each edge's
/// first endpoint. Nodes adjacent to everyone contribute no negatives.
pub fn sample_pairs(g: &Graph, per_edge: usize, rng: &mut Rng) -> PairSample {
    let n = g.n();
    let mut linked = Vec::with_capacity(2 * g.edges().len());
    let mut unlinked = Vec::new();
    let degree: Vec<usize> = g.neighbors().iter().map(Vec::len).collect();
    for &(u, v) in g.edges() {
        let (u, v) = (u as usize, v as usize);
        linked.push((u, v));
        linked.push((v, u));
        if per_edge == 0 || degree[u] + 1 >= n {
            continue;
        }
        let mut drawn = 0;
        while drawn < per_edge {
            let w = rng.below(n);
            if w != u && !g.has_edge(u, w) {
                unlinked.push((u, w));
                drawn += 1;
            }
        }
    }
    PairSample { linked, unlinked }
}

/// `Σ_linked -log σ(<y_i, y_j>) + Σ_unlinked -log(1 - σ(<y_i, y_j>))`,
/// or the mean over all those terms.
pub fn structure_tape(
    tape: &mut Tape,
    probs: Var,
    pairs: &PairSample,
    reduction: Reduction,
) -> Result<Var> {
    let n = tape.value(probs).rows();
    let out_of_range = pairs
        .linked
        .iter()
        .chain(&pairs.unlinked)
        .any(|&(a, b)| a >= n || b >= n);
    if out_of_range {
        return Err(Error::Contract("structure pair out of range".into()));
    }
    let count = pairs.linked.len() + pairs.unlinked.len();
    let mut total = tape.constant(Matrix::scalar(0.0));
    for (set, sign) in [(&pairs.linked, -1.0), (&pairs.unlinked, 1.0)] {
        if set.is_empty() {
            continue;
        }
        let (a, b): (Vec<usize>, Vec<usize>) = set.iter().copied().unzip();
        let ya = tape.gather_rows(probs, Rc::new(a));
        let yb = tape.gather_rows(probs, Rc::new(b));
        let sim = tape.row_dot(ya, yb);
        // -log σ(s) = softplus(-s), -log(1 - σ(s)) = softplus(s)
        let arg = tape.scale(sim, sign);
        let sp = tape.softplus(arg);
        let s = tape.sum(sp);
        total = tape.add(total, s);
    }
    Ok(match reduction {
        Reduction::Mean if count > 0 => tape.scale(total, 1.0 / count as f64),
        _ => total,
    })
}

pub fn structure_reg(probs: &Matrix, pairs: &PairSample, reduction: Reduction) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let v = structure_tape(&mut tape, p, pairs, reduction)?;
    Ok(tape.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_of, GradScope, ParamSet};

    fn pair_graph(edges: Vec<(u32, u32)>, n: usize) -> Graph {
        Graph::new(n, edges, Matrix::zeros(n, 1), vec![0; n], 1).unwrap()
    }

    #[test]
    fn connected_identical_one_hot() {
        let g = pair_graph(vec![(0, 1)], 2);
        let pairs = sample_pairs(&g, 0, &mut Rng::new(0));
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let v = structure_reg(&probs, &pairs, Reduction::Sum).unwrap();
        // two ordered pairs, -ln σ(1) each
        let per_pair = -(1.0 / (1.0 + (-1f64).exp())).ln();
        assert!((per_pair - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!((v - 2.0 * per_pair).abs() < 1e-15);
        let m = structure_reg(&probs, &pairs, Reduction::Mean).unwrap();
        assert!((m - per_pair).abs() < 1e-15);
    }

    #[test]
    fn disconnected_orthogonal_pair() {
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pairs = PairSample {
            linked: vec![],
            unlinked: vec![(0, 1)],
        };
        let v = structure_reg(&probs, &pairs, Reduction::Sum).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_graph_is_zero() {
        let g = pair_graph(vec![], 4);
        let pairs = sample_pairs(&g, 0, &mut Rng::new(0));
        let probs = Matrix::filled(4, 2, 0.5);
        assert_eq!(structure_reg(&probs, &pairs, Reduction::Mean).unwrap(), 0.0);
        assert_eq!(structure_reg(&probs, &pairs, Reduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn negatives_are_non_neighbours() {
        let g = pair_graph(vec![(0, 1), (1, 2), (3, 4)], 6);
        let pairs = sample_pairs(&g, 3, &mut Rng::new(7));
        assert_eq!(pairs.linked.len(), 6);
        assert_eq!(pairs.unlinked.len(), 9);
        for &(u, w) in &pairs.unlinked {
            assert!(u != w && !g.has_edge(u, w));
        }
        // complete graph: nothing to sample
        let k3 = pair_graph(vec![(0, 1), (0, 2), (1, 2)], 3);
        assert!(sample_pairs(&k3, 2, &mut Rng::new(0)).unlinked.is_empty());
    }

    #[test]
    fn descent_pulls_linked_predictions_together() {
        // logits -> softmax -> regulariser on a 2-node edge
        let mut params = ParamSet::new();
        params.insert("logits", Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
        let pairs = PairSample {
            linked: vec![(0, 1), (1, 0)],
            unlinked: vec![],
        };
        let sim = |p: &ParamSet| {
            let y = crate::numerics::autodiff::softmax_rows(p.value("logits"));
            crate::numerics::matrix::dot(y.row(0), y.row(1))
        };
        let before = sim(&params);
        let (_, g) = grad_of(&params, GradScope::All, |t, v| {
            let p = t.softmax(v.get("logits"));
            structure_tape(t, p, &pairs, Reduction::Mean)
        })
        .unwrap();
        params
            .value_mut("logits")
            .unwrap()
            .axpy(-0.5, &g["logits"]);
        assert!(sim(&params) > before);
    }
}
