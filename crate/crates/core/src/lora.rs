//! Frozen backbone plus a parallel low-rank branch, a linear feature
//! projector and a linear classification head.
//!
//! At every layer both branches read the same combined input `H^{l-1}`:
//!
//! ```text
//! Hp   = P H^{l-1}
//! H^l  = ReLU(Hp W^l + b^l) + ReLU(Hp W_B^l W_A^l)
//! ```
//!
//! The final-layer outputs of the two branches are also returned separately
//! (`h` and `h_prime`) because the contrastive objective contrasts them.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpnn::{bias_name, weight_name, BackboneParams};
use crate::numerics::autodiff::softmax_rows;
use crate::numerics::{GradScope, Matrix, ParamSet, ParamVars, Rng, Tape, Var};

pub const PROJECTOR_WEIGHT: &str = "projector.weight";
pub const PROJECTOR_BIAS: &str = "projector.bias";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

pub fn adapter_b_name(l: usize) -> String {
    format!("adapter.{l}.b")
}

pub fn adapter_a_name(l: usize) -> String {
    format!("adapter.{l}.a")
}

pub fn adapter_full_name(l: usize) -> String {
    format!("adapter.{l}.delta")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Standard deviation of the Gaussian init of `W_A`; `W_B` starts at 0.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

/// Parameterisation of the trainable weight update of each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    /// `W_B W_A` with the given rank.
    LowRank { rank: usize },
    /// Unfactorised `d_in x d_out` update.
    Full,
    /// No parallel branch at all.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: usize,
    pub adapter: AdapterKind,
    /// `false` feeds target features to the backbone unchanged.
    pub projector: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub arch: Architecture,
    pub params: ParamSet,
}

pub struct LoraOutput {
    /// Final-layer frozen-branch output.
    pub h: Matrix,
    /// Final-layer adapter-branch output (zeros when the branch is disabled).
    pub h_prime: Matrix,
    pub h_sum: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub h: Var,
    pub h_prime: Option<Var>,
    pub h_sum: Var,
}

impl AdaptedModel {
    /// Wraps a pretrained backbone with fresh adapters, projector and head.
    ///
    /// The projector starts at the identity when the target and source
    /// feature dimensions agree, otherwise Glorot-uniform.
    pub fn new(
        backbone: &BackboneParams,
        target_dim: usize,
        classes: usize,
        adapter: AdapterKind,
        projector: bool,
        cfg: &LoraConfig,
    ) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(backbone.input_dim())
            .chain(backbone.layers.iter().map(|l| l.weight.cols()))
            .collect();
        if let AdapterKind::LowRank { rank } = adapter {
            if rank == 0 {
                return Err(Error::Config("adapter rank must be at least 1".into()));
            }
        }
        if !projector && target_dim != backbone.input_dim() {
            return Err(Error::Contract(format!(
                "without a projector target features ({target_dim}) must match the backbone input ({})",
                backbone.input_dim()
            )));
        }
        // Separate streams so that disabling one component leaves the
        // initial values of the others unchanged.
        let mut adapter_rng = Rng::derive(cfg.seed, 1);
        let mut projector_rng = Rng::derive(cfg.seed, 2);
        let mut head_rng = Rng::derive(cfg.seed, 3);
        let mut params = ParamSet::new();
        backbone.insert_into(&mut params, true);

        for l in 0..backbone.layers.len() {
            let (din, dout) = (dims[l], dims[l + 1]);
            match adapter {
                AdapterKind::LowRank { rank } => {
                    params.insert(adapter_b_name(l), Matrix::zeros(din, rank), false);
                    params.insert(
                        adapter_a_name(l),
                        adapter_rng.gaussian_matrix(rank, dout, cfg.init_scale),
                        false,
                    );
                }
                AdapterKind::Full => {
                    params.insert(adapter_full_name(l), Matrix::zeros(din, dout), false);
                }
                AdapterKind::Disabled => {}
            }
        }

        if projector {
            let ds = backbone.input_dim();
            let w = if ds == target_dim {
                Matrix::identity(ds)
            } else {
                let limit = (6.0 / (ds + target_dim) as f64).sqrt();
                projector_rng.uniform_matrix(target_dim, ds, -limit, limit)
            };
            params.insert(PROJECTOR_WEIGHT, w, false);
            params.insert(PROJECTOR_BIAS, Matrix::zeros(1, ds), false);
        }

        let out = backbone.output_dim();
        let limit = (6.0 / (out + classes) as f64).sqrt();
        params.insert(
            CLASSIFIER_WEIGHT,
            head_rng.uniform_matrix(out, classes, -limit, limit),
            false,
        );
        params.insert(CLASSIFIER_BIAS, Matrix::zeros(1, classes), false);

        Ok(Self {
            arch: Architecture {
                layers: backbone.layers.len(),
                adapter,
                projector,
            },
            params,
        })
    }

    pub fn backbone(&self) -> Result<BackboneParams> {
        BackboneParams::from_params(&self.params, self.arch.layers, true)
    }

    pub fn classes(&self) -> usize {
        self.params.value(CLASSIFIER_WEIGHT).cols()
    }

    /// Names of frozen tensors, sorted.
    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Plain evaluation of projector, both branches and the head.
    pub fn forward(&self, x: &Matrix, p: &Matrix) -> Result<(LoraOutput, Matrix)> {
        self.check_inputs(x, p)?;
        let mut tape = Tape::new();
        let vars = crate::numerics::params::place_params(&mut tape, &self.params, GradScope::TrainableOnly);
        let xv = tape.constant(x.clone());
        let pv = tape.constant(p.clone());
        let z = project_tape(&mut tape, xv, &vars, self.arch.projector);
        let out = lora_forward_tape(&mut tape, z, pv, &vars, &self.arch);
        let logits = classifier_tape(&mut tape, out.h_sum, &vars);
        let h_prime = match out.h_prime {
            Some(v) => tape.value(v).clone(),
            None => Matrix::zeros(tape.value(out.h).rows(), tape.value(out.h).cols()),
        };
        Ok((
            LoraOutput {
                h: tape.value(out.h).clone(),
                h_prime,
                h_sum: tape.value(out.h_sum).clone(),
            },
            tape.value(logits).clone(),
        ))
    }

    fn check_inputs(&self, x: &Matrix, p: &Matrix) -> Result<()> {
        if p.rows() != p.cols() || p.rows() != x.rows() {
            return Err(Error::Contract(format!(
                "propagation {:?} incompatible with {} nodes",
                p.shape(),
                x.rows()
            )));
        }
        let expected = if self.arch.projector {
            self.params.value(PROJECTOR_WEIGHT).rows()
        } else {
            self.params.value(&weight_name(0)).rows()
        };
        if x.cols() != expected {
            return Err(Error::Contract(format!(
                "target features have dimension {}, model expects {expected}",
                x.cols()
            )));
        }
        Ok(())
    }
}

/// `Z = X w + 1 b^T`.
pub fn project_features(x: &Matrix, weight: &Matrix, bias: Option<&Matrix>) -> Result<Matrix> {
    let z = x.try_matmul(weight)?;
    Ok(match bias {
        Some(b) => {
            if b.shape() != (1, weight.cols()) {
                return Err(Error::Contract("projector bias shape mismatch".into()));
            }
            z.add_row_broadcast(b)
        }
        None => z,
    })
}

pub fn project_tape(tape: &mut Tape, x: Var, vars: &ParamVars, enabled: bool) -> Var {
    if !enabled {
        return x;
    }
    let z = tape.matmul(x, vars.get(PROJECTOR_WEIGHT));
    tape.add_row(z, vars.get(PROJECTOR_BIAS))
}

/// Both branches over all layers.
pub fn lora_forward_tape(
    tape: &mut Tape,
    z: Var,
    p: Var,
    vars: &ParamVars,
    arch: &Architecture,
) -> LoraVars {
    let mut h = z;
    let mut last = None;
    for l in 0..arch.layers {
        let hp = tape.matmul(p, h);
        let pre = tape.matmul(hp, vars.get(&weight_name(l)));
        let pre = match vars.try_get(&bias_name(l)) {
            Some(b) => tape.add_row(pre, b),
            None => pre,
        };
        let frozen = tape.relu(pre);
        let adapted = match arch.adapter {
            AdapterKind::LowRank { .. } => {
                let t = tape.matmul(hp, vars.get(&adapter_b_name(l)));
                let t = tape.matmul(t, vars.get(&adapter_a_name(l)));
                Some(tape.relu(t))
            }
            AdapterKind::Full => {
                let t = tape.matmul(hp, vars.get(&adapter_full_name(l)));
                Some(tape.relu(t))
            }
            AdapterKind::Disabled => None,
        };
        h = match adapted {
            Some(a) => tape.add(frozen, a),
            None => frozen,
        };
        last = Some((frozen, adapted));
    }
    let (frozen, adapted) = last.expect("at least one layer");
    LoraVars {
        h: frozen,
        h_prime: adapted,
        h_sum: h,
    }
}

pub fn classifier_tape(tape: &mut Tape, h_sum: Var, vars: &ParamVars) -> Var {
    let logits = tape.matmul(h_sum, vars.get(CLASSIFIER_WEIGHT));
    tape.add_row(logits, vars.get(CLASSIFIER_BIAS))
}

#[derive(Debug, Clone)]
pub struct Classification {
    pub logits: Matrix,
    pub probs: Matrix,
    pub labels: Vec<usize>,
}

/// Linear head, row softmax and argmax (ties to the lowest class index).
pub fn classify(h_sum: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Classification> {
    let logits = h_sum.try_matmul(weight)?;
    if bias.shape() != (1, weight.cols()) {
        return Err(Error::Contract("classifier bias shape mismatch".into()));
    }
    Ok(classify_logits(logits.add_row_broadcast(bias)))
}

pub fn classify_logits(logits: Matrix) -> Classification {
    let probs = softmax_rows(&logits);
    let labels = (0..probs.rows())
        .map(|i| crate::mpnn::argmax(probs.row(i)))
        .collect();
    Classification {
        logits,
        probs,
        labels,
    }
}

/// Trainable entries over all entries.
pub fn trainable_parameter_fraction(model: &AdaptedModel) -> f64 {
    let trainable = model.params.count_entries(Some(false)) as f64;
    let total = model.params.count_entries(None) as f64;
    trainable / total
}

/// Runs the full model on a tape for training.
pub struct TapeForward {
    pub z: Var,
    pub lora: LoraVars,
    pub logits: Var,
    pub probs: Var,
}

pub fn model_forward_tape(
    tape: &mut Tape,
    x: Rc<Matrix>,
    p: Rc<Matrix>,
    vars: &ParamVars,
    arch: &Architecture,
) -> TapeForward {
    let xv = tape.constant_rc(x);
    let pv = tape.constant_rc(p);
    let z = project_tape(tape, xv, vars, arch.projector);
    let lora = lora_forward_tape(tape, z, pv, vars, arch);
    let logits = classifier_tape(tape, lora.h_sum, vars);
    let probs = tape.softmax(logits);
    TapeForward {
        z,
        lora,
        logits,
        probs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpnn::{forward, GnnConfig, Layer};
    use crate::numerics::linalg::svd;

    fn backbone(rng: &mut Rng, dims: Vec<usize>, input: usize) -> BackboneParams {
        let mut b = BackboneParams::init(&GnnConfig::new(input, dims), rng).unwrap();
        for layer in &mut b.layers {
            layer.bias = Some(rng.gaussian_matrix(1, layer.weight.cols(), 0.1));
        }
        b.frozen = true;
        b
    }

    #[test]
    fn identity_projector_passes_features_through() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(project_features(&x, &Matrix::identity(2), Some(&Matrix::zeros(1, 2))).unwrap(), x);
        let b = Matrix::row_vector(&[0.3, -0.1, 2.0]);
        let z = project_features(&x, &Matrix::zeros(2, 3), Some(&b)).unwrap();
        for i in 0..2 {
            assert_eq!(z.row(i), b.row(0));
        }
        assert!(project_features(&x, &Matrix::zeros(3, 3), None).is_err());
    }

    #[test]
    fn projector_matches_direct_product() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_matrix(4, 3, 1.0);
        let w = rng.gaussian_matrix(3, 5, 1.0);
        let z = project_features(&x, &w, None).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let direct: f64 = (0..3).map(|k| x[(i, k)] * w[(k, j)]).sum();
                assert!((z[(i, j)] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_adapters_reproduce_frozen_forward() {
        let mut rng = Rng::new(4);
        let bb = backbone(&mut rng, vec![6, 3], 4);
        let model = AdaptedModel::new(&bb, 4, 2, AdapterKind::LowRank { rank: 2 }, true, &LoraConfig::default()).unwrap();
        let x = rng.gaussian_matrix(5, 4, 1.0);
        let p = rng.uniform_matrix(5, 5, 0.0, 0.4);
        let (out, _) = model.forward(&x, &p).unwrap();
        let frozen = forward(&x, &p, &bb).unwrap().pop().unwrap();
        assert_eq!(out.h_sum, frozen);
        assert_eq!(out.h, frozen);
        assert_eq!(out.h_prime, Matrix::zeros(5, 3));
    }

    #[test]
    fn full_rank_update_reproduces_target_in_linear_regime() {
        // With non-negative inputs, propagation, weights and biases every
        // pre-activation is >= 0, so the separate ReLUs act as the identity
        // and frozen + adapter equals the target layer exactly.
        let mut rng = Rng::new(6);
        let d = 3;
        let mk = |rng: &mut Rng| rng.uniform_matrix(d, d, 0.0, 1.0);
        let frozen_w = [mk(&mut rng), mk(&mut rng)];
        let delta = [mk(&mut rng), mk(&mut rng)];
        let biases = [rng.uniform_matrix(1, d, 0.0, 0.5), rng.uniform_matrix(1, d, 0.0, 0.5)];
        let bb = BackboneParams {
            layers: (0..2)
                .map(|l| Layer {
                    weight: frozen_w[l].clone(),
                    bias: Some(biases[l].clone()),
                })
                .collect(),
            frozen: true,
        };
        let target = BackboneParams {
            layers: (0..2)
                .map(|l| Layer {
                    weight: frozen_w[l].add(&delta[l]),
                    bias: Some(biases[l].clone()),
                })
                .collect(),
            frozen: true,
        };
        let mut model = AdaptedModel::new(&bb, d, 2, AdapterKind::LowRank { rank: d }, true, &LoraConfig::default()).unwrap();
        for l in 0..2 {
            // W_B W_A = delta with W_B = delta, W_A = I
            *model.params.value_mut(&adapter_b_name(l)).unwrap() = delta[l].clone();
            *model.params.value_mut(&adapter_a_name(l)).unwrap() = Matrix::identity(d);
        }
        let x = rng.uniform_matrix(6, d, 0.0, 1.0);
        let p = rng.uniform_matrix(6, 6, 0.0, 0.3);
        let (out, _) = model.forward(&x, &p).unwrap();
        let expected = forward(&x, &p, &target).unwrap().pop().unwrap();
        assert!(out.h_sum.max_abs_diff(&expected) <= 1e-9);
    }

    #[test]
    fn single_layer_two_node_hand_case() {
        let bb = BackboneParams {
            layers: vec![Layer {
                weight: Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 2.0]]),
                bias: Some(Matrix::row_vector(&[0.0, -1.0])),
            }],
            frozen: true,
        };
        let mut model = AdaptedModel::new(&bb, 2, 2, AdapterKind::LowRank { rank: 1 }, false, &LoraConfig::default()).unwrap();
        *model.params.value_mut(&adapter_b_name(0)).unwrap() = Matrix::column(&[1.0, -1.0]);
        *model.params.value_mut(&adapter_a_name(0)).unwrap() = Matrix::row_vector(&[2.0, 1.0]);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let (out, _) = model.forward(&x, &p).unwrap();
        // P X = 0.5 everywhere.
        // frozen: [0.5, -0.5 + 1.0 - 1.0] = [0.5, -0.5] -> [0.5, 0]
        // adapter: (P X) W_B = 0, so ReLU(0) = 0
        for i in 0..2 {
            assert_eq!(out.h.row(i), &[0.5, 0.0]);
            assert_eq!(out.h_prime.row(i), &[0.0, 0.0]);
        }
        let x = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]);
        let (out, _) = model.forward(&x, &p).unwrap();
        // P X = [[1, 0], [1, 0]] ; (P X) W_B = 1 ; * W_A = [2, 1]
        // frozen: [1, -1 - 1] -> [1, 0]
        for i in 0..2 {
            assert_eq!(out.h_prime.row(i), &[2.0, 1.0]);
            assert_eq!(out.h_sum.row(i), &[3.0, 1.0]);
        }
    }

    #[test]
    fn classify_ties_and_normalisation() {
        let c = classify_logits(Matrix::zeros(2, 3));
        assert_eq!(c.labels, vec![0, 0]);
        for v in c.probs.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let c = classify_logits(Matrix::from_rows(&[vec![0.0, 800.0, 0.0]]));
        assert_eq!(c.labels, vec![1]);
        assert!((c.probs[(0, 1)] - 1.0).abs() < 1e-12);

        let mut rng = Rng::new(10);
        let logits = rng.gaussian_matrix(6, 4, 3.0);
        let c = classify_logits(logits.clone());
        for i in 0..6 {
            let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                assert!((c.probs[(i, j)] - logits[(i, j)].exp() / z).abs() <= 1e-12);
            }
            assert!((c.probs.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn parameter_fraction_counts() {
        let mut rng = Rng::new(1);
        let bb = backbone(&mut rng, vec![512, 256], 500);
        let m = AdaptedModel::new(&bb, 500, 7, AdapterKind::LowRank { rank: 32 }, true, &LoraConfig::default()).unwrap();
        // independent arithmetic count
        let backbone = (500 * 512 + 512) + (512 * 256 + 256);
        let adapters = (500 * 32 + 32 * 512) + (512 * 32 + 32 * 256);
        let projector = 500 * 500 + 500;
        let head = 256 * 7 + 7;
        let trainable = adapters + projector + head;
        let expected = trainable as f64 / (trainable + backbone) as f64;
        assert_eq!(trainable_parameter_fraction(&m), expected);

        let no_branch = AdaptedModel::new(&bb, 500, 7, AdapterKind::Disabled, false, &LoraConfig::default()).unwrap();
        let head_share = head as f64 / (head + backbone) as f64;
        assert_eq!(trainable_parameter_fraction(&no_branch), head_share);

        let bigger = AdaptedModel::new(&bb, 500, 7, AdapterKind::LowRank { rank: 64 }, true, &LoraConfig::default()).unwrap();
        assert!(trainable_parameter_fraction(&bigger) > trainable_parameter_fraction(&m));
    }

    #[test]
    fn adapter_product_rank_is_bounded() {
        let mut rng = Rng::new(3);
        let b = rng.gaussian_matrix(8, 2, 1.0);
        let a = rng.gaussian_matrix(2, 6, 1.0);
        let s = svd(&b.matmul(&a)).unwrap();
        assert!(s.sigma[2] <= 1e-10);
    }

    #[test]
    fn missing_projector_requires_matching_dims() {
        let mut rng = Rng::new(4);
        let bb = backbone(&mut rng, vec![3], 4);
        assert!(AdaptedModel::new(&bb, 5, 2, AdapterKind::Disabled, false, &LoraConfig::default()).is_err());
    }
}
