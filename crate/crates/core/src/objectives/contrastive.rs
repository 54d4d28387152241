//! Label-augmented contrastive loss between the frozen-branch embeddings `H`
//! and the adapter-branch embeddings `H'`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Floor on row norms before cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over terms (per anchor, then over anchors).
    #[default]
    Mean,
    Sum,
}

/// Which node pairs count as positives for each anchor.
#[derive(Debug, Clone)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    /// For a labelled anchor `i`, every other labelled node of the same
    /// class. Unlabelled anchors get an empty set.
    pub fn from_labels(n: usize, labels: &[u32], labelled: &[usize]) -> Result<Self> {
        if labels.len() != n {
            return Err(Error::Contract(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        let mut sets = vec![Vec::new(); n];
        for &i in labelled {
            if i >= n {
                return Err(Error::Contract(format!("labelled node {i} out of range")));
            }
            for &k in labelled {
                if k != i && labels[k] == labels[i] {
                    sets[i].push(k);
                }
            }
        }
        Ok(Self { sets })
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight of the label positive in the numerator.
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            epsilon: 0.5,
            reduction: Reduction::Mean,
        }
    }
}

/// For each anchor `i` and each positive `k` (or once with only the
/// self-pair when there is none), the term
///
/// ```text
/// log (e^{s(h_i,h'_i)} + ε e^{s(h_i,h'_k)}) / (Σ_j e^{s(h_i,h'_j)} + Σ_{j≠i} e^{s(h_i,h_j)})
/// ```
///
/// with `s = cos / τ`. The loss is the negated reduction of these terms.
/// Negatives range over all nodes, anchors over `anchors`.
pub fn contrastive_tape(
    tape: &mut Tape,
    h: Var,
    h_prime: Var,
    anchors: &[usize],
    positives: &PositiveSets,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let (hv, hpv) = (tape.value(h), tape.value(h_prime));
    if hv.shape() != hpv.shape() {
        return Err(Error::Contract(format!(
            "H is {:?} but H' is {:?}",
            hv.shape(),
            hpv.shape()
        )));
    }
    let n = hv.rows();
    if positives.len() != n {
        return Err(Error::Contract("positive sets do not match node count".into()));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidInput("contrastive loss needs at least one anchor".into()));
    }
    if let Some(&bad) = anchors.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!("anchor {bad} out of range")));
    }
    let b = anchors.len();
    let inv_tau = 1.0 / cfg.temperature;

    let hn = tape.row_normalize(h, NORM_FLOOR);
    let hpn = tape.row_normalize(h_prime, NORM_FLOOR);
    let a = tape.gather_rows(hn, Rc::new(anchors.to_vec()));
    let cross = tape.matmul_t(a, hpn);
    let cross = tape.scale(cross, inv_tau);
    let intra = tape.matmul_t(a, hn);
    let intra = tape.scale(intra, inv_tau);
    let e_cross = tape.exp(cross);
    let e_intra = tape.exp(intra);
    let mask = Matrix::from_fn(b, n, |r, j| if j == anchors[r] { 0.0 } else { 1.0 });
    let e_intra = tape.mul_const(e_intra, Rc::new(mask));
    let d1 = tape.sum_rows(e_cross);
    let d2 = tape.sum_rows(e_intra);
    let den = tape.add(d1, d2);

    let mut self_at = Vec::new();
    let mut pos_at = Vec::new();
    let mut coef = Vec::new();
    let mut den_at = Vec::new();
    let mut weight = Vec::new();
    for (r, &i) in anchors.iter().enumerate() {
        let ks = positives.of(i);
        let terms = ks.len().max(1);
        let w = match cfg.reduction {
            Reduction::Mean => 1.0 / (terms * b) as f64,
            Reduction::Sum => 1.0,
        };
        if ks.is_empty() {
            self_at.push((r, i));
            pos_at.push((r, i));
            coef.push(0.0);
            den_at.push((r, 0));
            weight.push(w);
        }
        for &k in ks {
            self_at.push((r, i));
            pos_at.push((r, k));
            coef.push(cfg.epsilon);
            den_at.push((r, 0));
            weight.push(w);
        }
    }
    let own = tape.gather_entries(e_cross, Rc::new(self_at));
    let pos = tape.gather_entries(e_cross, Rc::new(pos_at));
    let pos = tape.mul_const(pos, Rc::new(Matrix::column(&coef)));
    let num = tape.add(own, pos);
    let den = tape.gather_entries(den, Rc::new(den_at));
    let log_num = tape.ln(num, f64::MIN_POSITIVE);
    let log_den = tape.ln(den, f64::MIN_POSITIVE);
    let terms = tape.sub(log_num, log_den);
    let weighted = tape.mul_const(terms, Rc::new(Matrix::column(&weight)));
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0))
}

/// Plain evaluation of [`contrastive_tape`].
pub fn contrastive_loss(
    h: &Matrix,
    h_prime: &Matrix,
    anchors: &[usize],
    positives: &PositiveSets,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let hpv = tape.constant(h_prime.clone());
    let v = contrastive_tape(&mut tape, hv, hpv, anchors, positives, cfg)?;
    Ok(tape.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
        d / (na * nb)
    }

    /// Literal double sum over anchors and positives.
    fn direct(h: &Matrix, hp: &Matrix, pos: &PositiveSets, tau: f64, eps: f64) -> f64 {
        let n = h.rows();
        let e = |a: &[f64], b: &[f64]| (cos(a, b) / tau).exp();
        let mut total = 0.0;
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                den += e(h.row(i), hp.row(j));
                if j != i {
                    den += e(h.row(i), h.row(j));
                }
            }
            let own = e(h.row(i), hp.row(i));
            if pos.of(i).is_empty() {
                total -= (own / den).ln();
            }
            for &k in pos.of(i) {
                total -= ((own + eps * e(h.row(i), hp.row(k))) / den).ln();
            }
        }
        total
    }

    fn sum_cfg() -> ContrastiveConfig {
        ContrastiveConfig {
            reduction: Reduction::Sum,
            ..ContrastiveConfig::default()
        }
    }

    #[test]
    fn single_node_is_zero() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let pos = PositiveSets::from_labels(1, &[0], &[0]).unwrap();
        let v = contrastive_loss(&h, &h, &[0], &pos, &ContrastiveConfig::default()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn two_node_orthogonal_case() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pos = PositiveSets::from_labels(2, &[0, 1], &[0, 1]).unwrap();
        let v = contrastive_loss(&h, &h, &[0, 1], &pos, &sum_cfg()).unwrap();
        // each anchor: e^2 / (e^2 + e^0 + e^0)
        let e2 = 2f64.exp();
        let expected = -2.0 * (e2 / (e2 + 2.0)).ln();
        assert!((v - expected).abs() < 1e-14);
        assert!((v - direct(&h, &h, &pos, 0.5, 0.5)).abs() < 1e-14);
    }

    #[test]
    fn matches_direct_sum_with_positives() {
        let mut rng = Rng::new(21);
        let h = rng.gaussian_matrix(7, 3, 1.0);
        let hp = rng.gaussian_matrix(7, 3, 1.0);
        let labels = [0, 1, 0, 1, 0, 0, 1];
        let pos = PositiveSets::from_labels(7, &labels, &[0, 1, 2, 4, 6]).unwrap();
        let all: Vec<usize> = (0..7).collect();
        let v = contrastive_loss(&h, &hp, &all, &pos, &sum_cfg()).unwrap();
        assert!((v - direct(&h, &hp, &pos, 0.5, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_drops_label_positives() {
        let mut rng = Rng::new(3);
        let h = rng.gaussian_matrix(5, 2, 1.0);
        let hp = rng.gaussian_matrix(5, 2, 1.0);
        let labels = [0, 0, 0, 1, 1];
        let with = PositiveSets::from_labels(5, &labels, &[0, 1, 2, 3, 4]).unwrap();
        let without = PositiveSets::from_labels(5, &labels, &[]).unwrap();
        let cfg = ContrastiveConfig {
            epsilon: 0.0,
            ..ContrastiveConfig::default()
        };
        let all: Vec<usize> = (0..5).collect();
        let a = contrastive_loss(&h, &hp, &all, &with, &cfg).unwrap();
        let b = contrastive_loss(&h, &hp, &all, &without, &cfg).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn zero_rows_are_guarded() {
        let h = Matrix::zeros(3, 2);
        let pos = PositiveSets::from_labels(3, &[0, 0, 0], &[0, 1]).unwrap();
        let v = contrastive_loss(&h, &h, &[0, 1, 2], &pos, &ContrastiveConfig::default()).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let pos = PositiveSets::from_labels(2, &[0, 0], &[]).unwrap();
        let r = contrastive_loss(&Matrix::zeros(2, 2), &Matrix::zeros(2, 3), &[0], &pos, &ContrastiveConfig::default());
        assert!(r.is_err());
    }
}
