//! Propagate/transform message-passing backbone and its pretraining.
//!
//! Node embeddings are stored node-major (`n x d`), so a layer computes
//! `ReLU((P H) W + 1 b^T)`: propagate with the normalised adjacency `P`, then
//! apply the affine transform and the activation. This is the transpose of
//! the feature-major `ReLU(W H P + B)` convention and is used everywhere in
//! the crate.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::{sym_norm_adj, Graph};
use crate::numerics::{
    grad_of, AdamConfig, AdamState, GradScope, Matrix, ParamSet, ParamVars, Rng, Tape, Var,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub use_bias: bool,
}

impl GnnConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_dims,
            use_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("a GNN needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        Ok(())
    }

    /// `[input, hidden_1, ..., hidden_L]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated config")
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `d_in x d_out`
    pub weight: Matrix,
    /// `1 x d_out`
    pub bias: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<Layer>,
    pub frozen: bool,
}

pub fn weight_name(l: usize) -> String {
    format!("backbone.{l}.weight")
}

pub fn bias_name(l: usize) -> String {
    format!("backbone.{l}.bias")
}

impl BackboneParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(cfg: &GnnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims();
        let layers = dims
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weight: rng.uniform_matrix(w[0], w[1], -limit, limit),
                    bias: cfg.use_bias.then(|| Matrix::zeros(1, w[1])),
                }
            })
            .collect();
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    pub fn config(&self) -> GnnConfig {
        GnnConfig {
            input_dim: self.layers[0].weight.rows(),
            hidden_dims: self.layers.iter().map(|l| l.weight.cols()).collect(),
            use_bias: self.layers.iter().all(|l| l.bias.is_some()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty backbone").weight.cols()
    }

    pub fn num_entries(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, Matrix::len))
            .sum()
    }

    pub fn insert_into(&self, params: &mut ParamSet, frozen: bool) {
        for (l, layer) in self.layers.iter().enumerate() {
            params.insert(weight_name(l), layer.weight.clone(), frozen);
            if let Some(b) = &layer.bias {
                params.insert(bias_name(l), b.clone(), frozen);
            }
        }
    }

    pub fn from_params(params: &ParamSet, num_layers: usize, frozen: bool) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let weight = params
                .get(&weight_name(l))
                .ok_or_else(|| Error::Contract(format!("missing {}", weight_name(l))))?
                .value
                .clone();
            let bias = params.get(&bias_name(l)).map(|p| p.value.clone());
            layers.push(Layer { weight, bias });
        }
        Ok(Self { layers, frozen })
    }

    fn check_chain(&self, input_dim: usize) -> Result<()> {
        let mut d = input_dim;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weight.rows() != d {
                return Err(Error::Contract(format!(
                    "layer {l} expects input dim {}, got {d}",
                    layer.weight.rows()
                )));
            }
            if let Some(b) = &layer.bias {
                if b.shape() != (1, layer.weight.cols()) {
                    return Err(Error::Contract(format!("layer {l} bias has wrong shape")));
                }
            }
            d = layer.weight.cols();
        }
        Ok(())
    }
}

/// One propagate/transform step: `ReLU((P H) W + 1 b^T)`.
pub fn layer_forward(h_prev: &Matrix, p: &Matrix, layer: &Layer) -> Result<Matrix> {
    if p.rows() != p.cols() || p.cols() != h_prev.rows() {
        return Err(Error::Contract(format!(
            "propagation matrix {:?} incompatible with embeddings {:?}",
            p.shape(),
            h_prev.shape()
        )));
    }
    if layer.weight.rows() != h_prev.cols() {
        return Err(Error::Contract(format!(
            "weight {:?} incompatible with embeddings {:?}",
            layer.weight.shape(),
            h_prev.shape()
        )));
    }
    let mut z = p.matmul(h_prev).matmul(&layer.weight);
    if let Some(b) = &layer.bias {
        z = z.add_row_broadcast(b);
    }
    Ok(z.map(|v| v.max(0.0)))
}

/// Full forward pass; returns every layer's output, the last one being the
/// embeddings.
pub fn forward(x: &Matrix, p: &Matrix, backbone: &BackboneParams) -> Result<Vec<Matrix>> {
    backbone.check_chain(x.cols())?;
    let mut acts = Vec::with_capacity(backbone.layers.len());
    let mut h = x.clone();
    for layer in &backbone.layers {
        h = layer_forward(&h, p, layer)?;
        acts.push(h.clone());
    }
    Ok(acts)
}

/// Tape version of [`layer_forward`] with the same operation order.
pub fn layer_forward_tape(tape: &mut Tape, h: Var, p: Var, w: Var, b: Option<Var>) -> Var {
    let hp = tape.matmul(p, h);
    let mut z = tape.matmul(hp, w);
    if let Some(b) = b {
        z = tape.add_row(z, b);
    }
    tape.relu(z)
}

pub fn forward_tape(tape: &mut Tape, x: Var, p: Var, vars: &ParamVars, num_layers: usize) -> Var {
    let mut h = x;
    for l in 0..num_layers {
        let w = vars.get(&weight_name(l));
        let b = vars.try_get(&bias_name(l));
        h = layer_forward_tape(tape, h, p, w, b);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMode {
    Supervised,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub edge_drop: f64,
    pub feature_mask: f64,
    pub temperature: f64,
    /// Anchor batch for the contrastive loss; `None` uses every node.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::Contrastive,
            hidden_dims: vec![512, 256],
            epochs: 200,
            lr: 1e-3,
            weight_decay: 1e-4,
            edge_drop: 0.2,
            feature_mask: 0.2,
            temperature: 0.5,
            batch_size: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("edge_drop", self.edge_drop), ("feature_mask", self.feature_mask)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1)")));
            }
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Frozen backbone.
    pub backbone: BackboneParams,
    pub losses: Vec<f64>,
    /// Training-set accuracy of the discarded linear head (supervised mode).
    pub train_accuracy: Option<f64>,
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

pub fn pretrain(g: &Graph, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    match cfg.mode {
        PretrainMode::Supervised => pretrain_supervised(g, cfg),
        PretrainMode::Contrastive => pretrain_contrastive(g, cfg),
    }
}

/// Mean cross-entropy of `softmax(logits)` over the rows in `idx`.
pub(crate) fn cross_entropy_tape(tape: &mut Tape, logits: Var, labels: &[u32], idx: &[usize]) -> Var {
    let probs = tape.softmax(logits);
    let at: Vec<(usize, usize)> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| (k, labels[i] as usize))
        .collect();
    let rows = tape.gather_rows(probs, Rc::new(idx.to_vec()));
    let picked = tape.gather_entries(rows, Rc::new(at));
    let logp = tape.ln(picked, 1e-12);
    let m = tape.mean(logp);
    tape.scale(m, -1.0)
}

pub fn pretrain_supervised(g: &Graph, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let gnn = GnnConfig::new(g.feature_dim(), cfg.hidden_dims.clone());
    let backbone = BackboneParams::init(&gnn, &mut rng)?;
    let mut params = ParamSet::new();
    backbone.insert_into(&mut params, false);
    let limit = (6.0 / (gnn.output_dim() + g.classes()) as f64).sqrt();
    params.insert(
        HEAD_WEIGHT,
        rng.uniform_matrix(gnn.output_dim(), g.classes(), -limit, limit),
        false,
    );
    params.insert(HEAD_BIAS, Matrix::zeros(1, g.classes()), false);

    let train: Vec<usize> = match g.splits() {
        Some(s) if !s.train.is_empty() => s.train.clone(),
        _ => (0..g.n()).collect(),
    };
    let p = Rc::new(sym_norm_adj(g));
    let x = Rc::new(g.features().clone());
    let layers = gnn.num_layers();
    let mut adam = AdamState::new(cfg.adam());
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (loss, grads) = grad_of(&params, GradScope::TrainableOnly, |tape, vars| {
            let xv = tape.constant_rc(x.clone());
            let pv = tape.constant_rc(p.clone());
            let h = forward_tape(tape, xv, pv, vars, layers);
            let logits = tape.matmul(h, vars.get(HEAD_WEIGHT));
            let logits = tape.add_row(logits, vars.get(HEAD_BIAS));
            Ok(cross_entropy_tape(tape, logits, g.labels(), &train))
        })
        .map_err(|e| Error::Training(format!("supervised pretraining, epoch {epoch}: {e}")))?;
        losses.push(loss);
        adam.step(&mut params, &grads)?;
    }

    let mut backbone = BackboneParams::from_params(&params, layers, true)?;
    backbone.frozen = true;
    let emb = forward(&x, &p, &backbone)?.pop().expect("at least one layer");
    let logits = emb
        .matmul(params.value(HEAD_WEIGHT))
        .add_row_broadcast(params.value(HEAD_BIAS));
    let correct = train
        .iter()
        .filter(|&&i| argmax(logits.row(i)) == g.label(i))
        .count();
    Ok(PretrainOutcome {
        backbone,
        losses,
        train_accuracy: Some(correct as f64 / train.len() as f64),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// One stochastic view: dropped edges and masked feature columns.
pub fn augment(g: &Graph, edge_drop: f64, feature_mask: f64, rng: &mut Rng) -> (Matrix, Matrix) {
    let kept: Vec<(u32, u32)> = g
        .edges()
        .iter()
        .copied()
        .filter(|_| !rng.bernoulli(edge_drop))
        .collect();
    let p = sym_norm_adj(&g.with_edges(kept));
    let d = g.feature_dim();
    let keep: Vec<f64> = (0..d)
        .map(|_| if rng.bernoulli(feature_mask) { 0.0 } else { 1.0 })
        .collect();
    let mut x = g.features().clone();
    for i in 0..x.rows() {
        for (v, k) in x.row_mut(i).iter_mut().zip(&keep) {
            *v *= k;
        }
    }
    (x, p)
}

/// Cross-view InfoNCE with same-node positives, averaged over both anchor
/// directions. Negatives are every other node in both views.
pub fn infonce_views(tape: &mut Tape, u: Var, v: Var, temperature: f64) -> Var {
    let a = one_direction(tape, u, v, temperature);
    let b = one_direction(tape, v, u, temperature);
    let s = tape.add(a, b);
    tape.scale(s, 0.5)
}

fn one_direction(tape: &mut Tape, anchor: Var, other: Var, temperature: f64) -> Var {
    let n = tape.value(anchor).rows();
    let an = tape.row_normalize(anchor, 1e-12);
    let on = tape.row_normalize(other, 1e-12);
    let cross = tape.matmul_t(an, on);
    let cross = tape.scale(cross, 1.0 / temperature);
    let intra = tape.matmul_t(an, an);
    let intra = tape.scale(intra, 1.0 / temperature);
    let e_cross = tape.exp(cross);
    let e_intra = tape.exp(intra);
    let off_diag = Rc::new(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
    let e_intra = tape.mul_const(e_intra, off_diag);
    let d1 = tape.sum_rows(e_cross);
    let d2 = tape.sum_rows(e_intra);
    let den = tape.add(d1, d2);
    let log_den = tape.ln(den, 1e-300);
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let pos = tape.gather_entries(cross, Rc::new(diag));
    let per_node = tape.sub(log_den, pos);
    tape.mean(per_node)
}

pub fn pretrain_contrastive(g: &Graph, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let gnn = GnnConfig::new(g.feature_dim(), cfg.hidden_dims.clone());
    let backbone = BackboneParams::init(&gnn, &mut rng)?;
    let mut params = ParamSet::new();
    backbone.insert_into(&mut params, false);
    let layers = gnn.num_layers();
    let mut adam = AdamState::new(cfg.adam());
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (x1, p1) = augment(g, cfg.edge_drop, cfg.feature_mask, &mut rng);
        let (x2, p2) = augment(g, cfg.edge_drop, cfg.feature_mask, &mut rng);
        let anchors: Option<Rc<Vec<usize>>> = cfg
            .batch_size
            .filter(|&b| b < g.n())
            .map(|b| {
                let mut idx = rng.sample_indices(g.n(), b);
                idx.sort_unstable();
                Rc::new(idx)
            });
        let (loss, grads) = grad_of(&params, GradScope::TrainableOnly, |tape, vars| {
            let x1 = tape.constant(x1.clone());
            let p1 = tape.constant(p1.clone());
            let x2 = tape.constant(x2.clone());
            let p2 = tape.constant(p2.clone());
            let mut u = forward_tape(tape, x1, p1, vars, layers);
            let mut v = forward_tape(tape, x2, p2, vars, layers);
            if let Some(idx) = &anchors {
                u = tape.gather_rows(u, idx.clone());
                v = tape.gather_rows(v, idx.clone());
            }
            Ok(infonce_views(tape, u, v, cfg.temperature))
        })
        .map_err(|e| Error::Training(format!("contrastive pretraining, epoch {epoch}: {e}")))?;
        losses.push(loss);
        adam.step(&mut params, &grads)?;
    }

    let backbone = BackboneParams::from_params(&params, layers, true)?;
    Ok(PretrainOutcome {
        backbone,
        losses,
        train_accuracy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphio::{gen_synth, SynthSpec};
    use crate::numerics::finite_diff_check;

    fn two_nodes() -> (Matrix, Matrix) {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let p = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        (x, p)
    }

    #[test]
    fn identity_layer_is_relu() {
        let (x, _) = two_nodes();
        let layer = Layer {
            weight: Matrix::identity(2),
            bias: Some(Matrix::zeros(1, 2)),
        };
        let out = layer_forward(&x, &Matrix::identity(2), &layer).unwrap();
        assert_eq!(out, x.map(|v| v.max(0.0)));
    }

    #[test]
    fn negative_preactivation_gives_zero() {
        let (x, p) = two_nodes();
        let layer = Layer {
            weight: Matrix::zeros(2, 3),
            bias: Some(Matrix::filled(1, 3, -1.0)),
        };
        assert_eq!(layer_forward(&x, &p, &layer).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn hand_evaluated_two_node_layer() {
        let (x, p) = two_nodes();
        let layer = Layer {
            weight: Matrix::from_rows(&[vec![1.0, 0.0, -1.0], vec![2.0, 1.0, 0.5]]),
            bias: Some(Matrix::row_vector(&[0.1, -0.2, 0.0])),
        };
        // P X = [[0.75, 0.5], [0.75, 0.5]]
        // (P X) W + b = [0.75 + 1.0 + 0.1, 0.5 - 0.2, -0.75 + 0.25] = [1.85, 0.3, -0.5]
        let out = layer_forward(&x, &p, &layer).unwrap();
        for i in 0..2 {
            assert!((out[(i, 0)] - 1.85).abs() < 1e-15);
            assert!((out[(i, 1)] - 0.3).abs() < 1e-15);
            assert_eq!(out[(i, 2)], 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let (x, p) = two_nodes();
        let layer = Layer {
            weight: Matrix::zeros(3, 1),
            bias: None,
        };
        assert!(matches!(layer_forward(&x, &p, &layer), Err(Error::Contract(_))));
        let bad_p = Matrix::identity(3);
        let ok = Layer {
            weight: Matrix::zeros(2, 1),
            bias: None,
        };
        assert!(layer_forward(&x, &bad_p, &ok).is_err());
    }

    #[test]
    fn two_layer_forward_matches_manual_composition() {
        let mut rng = Rng::new(5);
        let cfg = GnnConfig::new(3, vec![4, 2]);
        let bb = BackboneParams::init(&cfg, &mut rng).unwrap();
        let x = rng.gaussian_matrix(5, 3, 1.0);
        let p = rng.uniform_matrix(5, 5, 0.0, 0.3);
        let acts = forward(&x, &p, &bb).unwrap();
        let relu = |m: Matrix| m.map(|v| v.max(0.0));
        let h1 = relu(p.matmul(&x).matmul(&bb.layers[0].weight).add_row_broadcast(bb.layers[0].bias.as_ref().unwrap()));
        let h2 = relu(p.matmul(&h1).matmul(&bb.layers[1].weight).add_row_broadcast(bb.layers[1].bias.as_ref().unwrap()));
        assert!(acts[1].max_abs_diff(&h2) < 1e-14);
        assert_eq!(forward(&x, &p, &bb).unwrap(), acts);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let cfg = GnnConfig::new(3, vec![4, 2]);
        let bb = BackboneParams::init(&cfg, &mut rng).unwrap();
        let mut ps = ParamSet::new();
        bb.insert_into(&mut ps, false);
        for (_, p) in ps.iter_mut() {
            p.value = p.value.map(|v| v + 0.05);
        }
        let x = rng.gaussian_matrix(4, 3, 1.0);
        let p = rng.uniform_matrix(4, 4, 0.0, 0.5);
        let rep = finite_diff_check(&ps, 1e-6, |tape, vars| {
            let xv = tape.constant(x.clone());
            let pv = tape.constant(p.clone());
            let h = forward_tape(tape, xv, pv, vars, 2);
            let sq = tape.mul(h, h);
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(rep.max_deviation <= 1e-5, "{rep:?}");
    }

    #[test]
    fn zero_lr_single_epoch_keeps_init() {
        let g = gen_synth(&SynthSpec {
            nodes_per_class: 10,
            feature_dim: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            mode: PretrainMode::Supervised,
            hidden_dims: vec![8, 4],
            epochs: 1,
            lr: 0.0,
            weight_decay: 0.0,
            seed: 3,
            ..PretrainConfig::default()
        };
        let out = pretrain_supervised(&g, &cfg).unwrap();
        let init = BackboneParams::init(&GnnConfig::new(4, vec![8, 4]), &mut Rng::new(3)).unwrap();
        assert_eq!(out.backbone.layers, init.layers);
        assert!(out.backbone.frozen);
    }

    #[test]
    fn single_class_is_trivially_fit() {
        let g = gen_synth(&SynthSpec {
            classes: 1,
            nodes_per_class: 20,
            feature_dim: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            mode: PretrainMode::Supervised,
            hidden_dims: vec![8],
            epochs: 5,
            ..PretrainConfig::default()
        };
        let out = pretrain_supervised(&g, &cfg).unwrap();
        assert_eq!(out.train_accuracy, Some(1.0));
        assert!(out.losses.iter().all(|&l| l.abs() < 1e-9));
    }

    #[test]
    fn no_augmentation_gives_identical_views() {
        let g = gen_synth(&SynthSpec {
            nodes_per_class: 10,
            feature_dim: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut rng = Rng::new(0);
        let a = augment(&g, 0.0, 0.0, &mut rng);
        let b = augment(&g, 0.0, 0.0, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a.0, *g.features());
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let mut ps = ParamSet::new();
        ps.insert("u", rng.gaussian_matrix(5, 3, 1.0), false);
        ps.insert("v", rng.gaussian_matrix(5, 3, 1.0), false);
        let rep = finite_diff_check(&ps, 1e-6, |tape, vars| {
            Ok(infonce_views(tape, vars.get("u"), vars.get("v"), 0.5))
        })
        .unwrap();
        assert!(rep.max_deviation <= 1e-5, "{rep:?}");
    }
}
