use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::objectives::LossParts;

/// Fraction of `mask` whose prediction equals the label.
pub fn accuracy(pred: &[usize], labels: &[u32], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::InvalidInput("accuracy over an empty mask".into()));
    }
    let mut correct = 0usize;
    for &i in mask {
        if i >= pred.len() || i >= labels.len() {
            return Err(Error::Contract(format!("mask node {i} out of range")));
        }
        correct += usize::from(pred[i] == labels[i] as usize);
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// `counts[true][predicted]` over `mask`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn tally(pred: &[usize], labels: &[u32], mask: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![vec![0usize; classes]; classes];
        for &i in mask {
            let (t, p) = (labels[i] as usize, pred[i]);
            if t >= classes || p >= classes {
                return Err(Error::Contract(format!("class index out of range at node {i}")));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.counts.len()).map(|c| self.counts[c][c]).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean intra-class cosine minus mean inter-class cosine over distinct
/// node pairs.
pub fn class_separation(emb: &Matrix, labels: &[u32]) -> Result<f64> {
    let n = emb.rows();
    if labels.len() != n {
        return Err(Error::Contract("one label per embedding row is required".into()));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let denom = norms[i] * norms[j];
            let c = if denom > 0.0 {
                crate::numerics::matrix::dot(emb.row(i), emb.row(j)) / denom
            } else {
                0.0
            };
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::InvalidInput(
            "class separation needs both intra- and inter-class pairs".into(),
        ));
    }
    Ok(intra / n_intra as f64 - inter / n_inter as f64)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub split: String,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    pub trainable_fraction: f64,
    pub wall_clock_s: f64,
    /// Source feature rows visible to the distribution-matching term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_sample_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curves: Vec<Vec<LossRecord>>,
}

impl MetricsReport {
    pub fn from_seeds(
        label: impl Into<String>,
        split: impl Into<String>,
        per_seed: Vec<SeedResult>,
        trainable_fraction: f64,
    ) -> Self {
        let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        let wall_clock_s = per_seed.iter().map(|s| s.wall_clock_s).sum();
        Self {
            label: label.into(),
            split: split.into(),
            per_seed,
            mean,
            std,
            trainable_fraction,
            wall_clock_s,
            source_sample_rows: None,
            loss_curves: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_extremes() {
        let labels = [0, 1, 2, 0, 1, 2];
        let perfect: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(accuracy(&perfect, &labels, &all).unwrap(), 1.0);
        let constant = vec![1; 6];
        assert!((accuracy(&constant, &labels, &all).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&perfect, &labels, &[]).is_err());
    }

    #[test]
    fn confusion_matches_accuracy() {
        let labels = [0, 0, 1, 1, 1];
        let pred = [0, 1, 1, 0, 1];
        let mask = [0, 1, 2, 3, 4];
        let c = Confusion::tally(&pred, &labels, &mask, 2).unwrap();
        assert_eq!(c.counts, vec![vec![1, 1], vec![1, 2]]);
        assert_eq!(c.accuracy(), accuracy(&pred, &labels, &mask).unwrap());
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.9]);
        assert!((m - 0.7).abs() < 1e-15);
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn separation_of_clustered_embeddings() {
        let emb = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0], vec![0.0, 3.0]]);
        assert_eq!(class_separation(&emb, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(class_separation(&emb, &[0, 1, 0, 1]).unwrap(), -0.5);
    }

    #[test]
    fn loss_record_json_shape() {
        let r = LossRecord {
            step: 3,
            parts: LossParts {
                cls: 1.0,
                smmd: 0.5,
                cl: 2.0,
                str_: 0.25,
                reg: 4.0,
            },
            total: 7.75,
        };
        let v: serde_json::Value = serde_json::to_value(r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["cl", "cls", "reg", "smmd", "step", "str", "total"]);
    }
}
