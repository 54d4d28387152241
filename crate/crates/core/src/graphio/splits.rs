use serde::{Deserialize, Serialize};

use super::graph::{Graph, Splits};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Fraction of all nodes placed in the test set under the k-shot protocol.
pub const KSHOT_TEST_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitProtocol {
    /// `train_per_class` labelled nodes per class, then `val` and `test`
    /// nodes drawn from the rest.
    PublicStyle {
        train_per_class: usize,
        val: usize,
        test: usize,
    },
    /// `k` labelled nodes per class, 80% of all nodes for test, the remainder
    /// for validation.
    KShot { k: usize },
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol::KShot { k: 10 }
    }
}

pub fn make_splits(g: &Graph, protocol: SplitProtocol, seed: u64) -> Result<Splits> {
    let mut rng = Rng::new(seed);
    let per_class = match protocol {
        SplitProtocol::PublicStyle {
            train_per_class, ..
        } => train_per_class,
        SplitProtocol::KShot { k } => k,
    };

    let mut train = Vec::new();
    let mut rest = Vec::new();
    for c in 0..g.classes() {
        let mut members = g.nodes_of_class(c);
        if members.len() < per_class {
            return Err(Error::Protocol(format!(
                "class {c} has {} nodes, protocol needs {per_class}",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        train.extend_from_slice(&members[..per_class]);
        rest.extend_from_slice(&members[per_class..]);
    }
    rest.sort_unstable();
    rng.shuffle(&mut rest);

    let (val, test) = match protocol {
        SplitProtocol::PublicStyle { val, test, .. } => {
            if val + test > rest.len() {
                return Err(Error::Protocol(format!(
                    "{} unlabelled nodes cannot supply {val} validation + {test} test",
                    rest.len()
                )));
            }
            (rest[..val].to_vec(), rest[val..val + test].to_vec())
        }
        SplitProtocol::KShot { .. } => {
            let n_test = ((KSHOT_TEST_FRACTION * g.n() as f64).floor() as usize).min(rest.len());
            (rest[n_test..].to_vec(), rest[..n_test].to_vec())
        }
    };

    let mut s = Splits { train, val, test };
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn graph(labels: Vec<u32>, classes: usize) -> Graph {
        let n = labels.len();
        Graph::new(n, vec![], Matrix::zeros(n, 1), labels, classes).unwrap()
    }

    #[test]
    fn ten_shot_seven_classes() {
        let labels: Vec<u32> = (0..350).map(|i| (i % 7) as u32).collect();
        let g = graph(labels, 7);
        let s = make_splits(&g, SplitProtocol::KShot { k: 10 }, 3).unwrap();
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.test.len(), 280);
        assert_eq!(s.val.len(), 0);
        for c in 0..7 {
            assert_eq!(s.train.iter().filter(|&&i| g.label(i) == c).count(), 10);
        }
    }

    #[test]
    fn one_shot_single_class() {
        let g = graph(vec![0; 10], 1);
        let s = make_splits(&g, SplitProtocol::KShot { k: 1 }, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.val.len()), (1, 8, 1));
        s.validate(10).unwrap();
    }

    #[test]
    fn too_few_nodes_is_protocol_error() {
        let g = graph(vec![0, 0, 0, 1, 1, 1, 1, 1, 1], 2);
        assert!(matches!(
            make_splits(&g, SplitProtocol::KShot { k: 5 }, 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn public_style_counts() {
        let labels: Vec<u32> = (0..100).map(|i| (i % 2) as u32).collect();
        let g = graph(labels, 2);
        let p = SplitProtocol::PublicStyle {
            train_per_class: 20,
            val: 20,
            test: 40,
        };
        let s = make_splits(&g, p, 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40, 20, 40));
        assert_eq!(s, make_splits(&g, p, 9).unwrap());
        assert_ne!(s, make_splits(&g, p, 10).unwrap());
    }
}
