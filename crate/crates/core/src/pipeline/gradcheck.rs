//! Finite-difference checks of every loss term and the combined objective
//! on random micro-instances.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::config::GradcheckConfig;
use crate::error::{Error, Result};
use crate::graphio::{ppr_diffusion, sym_norm_adj, DiffusionConfig, Graph};
use crate::lora::{model_forward_tape, AdaptedModel, AdapterKind, LoraConfig};
use crate::mpnn::{BackboneParams, GnnConfig};
use crate::numerics::{finite_diff_check, Matrix, ParamVars, Rng, Tape, Var};
use crate::objectives::{
    classification_tape, contrastive_tape, param_sq_norm_tape, sample_pairs, smmd_gamma,
    smmd_tape, structure_tape, ContrastiveConfig, KernelConfig, LossWeights, PairSample,
    PositiveSets,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    Cls,
    Mmd,
    Smmd,
    Cl,
    Str,
    Total,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Cls, Term::Mmd, Term::Smmd, Term::Cl, Term::Str, Term::Total];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub seed: u64,
    pub term: Term,
    pub nodes: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<GradcheckEntry>,
    pub all_pass: bool,
}

struct Micro {
    graph: Graph,
    model: AdaptedModel,
    prop: Rc<Matrix>,
    gamma: Matrix,
    source: Matrix,
    train: Vec<usize>,
    anchors: Vec<usize>,
    positives: PositiveSets,
    pairs: PairSample,
}

fn micro_instance(cfg: &GradcheckConfig, seed: u64) -> Result<Micro> {
    let mut rng = Rng::new(seed);
    let n = 4 + rng.below(cfg.nodes.saturating_sub(3).max(1));
    let d = 2 + rng.below(cfg.feature_dim.saturating_sub(1).max(1));
    let c = 2 + rng.below(cfg.classes.saturating_sub(1).max(1));
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.bernoulli(0.35) {
                edges.push((u as u32, v as u32));
            }
        }
    }
    let labels: Vec<u32> = (0..n).map(|_| rng.below(c) as u32).collect();
    let features = rng.gaussian_matrix(n, d, 1.0);
    let graph = Graph::new(n, edges, features, labels, c)?;

    let ds = 2 + rng.below(cfg.feature_dim.saturating_sub(1).max(1));
    let hidden = vec![2 + rng.below(7), 2 + rng.below(7)];
    let mut backbone = BackboneParams::init(&GnnConfig::new(ds, hidden), &mut rng)?;
    backbone.frozen = true;
    let lora = LoraConfig {
        rank: 2,
        init_scale: 0.5,
        seed,
    };
    let mut model = AdaptedModel::new(&backbone, d, c, AdapterKind::LowRank { rank: 2 }, true, &lora)?;
    // Random values everywhere: zero-initialised factors would put every
    // adapter ReLU exactly on its kink.
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let m = model.params.value_mut(&name).expect("listed name");
        *m = rng.gaussian_matrix(m.rows(), m.cols(), 0.5);
    }

    let prop = Rc::new(sym_norm_adj(&graph));
    let gamma = smmd_gamma(&ppr_diffusion(&graph, &DiffusionConfig::default())?);
    let source_rows = 6 + rng.below(6);
    let source = rng.gaussian_matrix(source_rows, ds, 1.0);
    let mut train = rng.sample_indices(n, (n / 2).max(1));
    train.sort_unstable();
    let mut anchors = rng.sample_indices(n, (n / 2).max(2).min(n));
    anchors.sort_unstable();
    let positives = PositiveSets::from_labels(n, graph.labels(), &train)?;
    let pairs = sample_pairs(&graph, 1, &mut rng);
    Ok(Micro {
        graph,
        model,
        prop,
        gamma,
        source,
        train,
        anchors,
        positives,
        pairs,
    })
}

fn term_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    m: &Micro,
    term: Term,
    weights: &LossWeights,
    kernel: &KernelConfig,
) -> Result<Var> {
    let x = Rc::new(m.graph.features().clone());
    let fwd = model_forward_tape(tape, x, m.prop.clone(), vars, &m.model.arch);
    let mut parts = Vec::new();
    if matches!(term, Term::Cls | Term::Total) {
        parts.push((1.0, classification_tape(tape, fwd.probs, m.graph.labels(), &m.train)?));
    }
    if matches!(term, Term::Mmd) {
        parts.push((1.0, smmd_tape(tape, fwd.z, &m.source, None, kernel)?));
    }
    if matches!(term, Term::Smmd | Term::Total) {
        let v = smmd_tape(tape, fwd.z, &m.source, Some(&m.gamma), kernel)?;
        parts.push((weights.smmd, v));
    }
    if matches!(term, Term::Cl | Term::Total) {
        let cfg = ContrastiveConfig {
            temperature: weights.temperature,
            epsilon: weights.epsilon,
            reduction: weights.reduction,
        };
        let hp = fwd
            .lora
            .h_prime
            .ok_or_else(|| Error::Contract("micro model has no adapter branch".into()))?;
        let v = contrastive_tape(tape, fwd.lora.h, hp, &m.anchors, &m.positives, &cfg)?;
        parts.push((weights.cl, v));
    }
    if matches!(term, Term::Str | Term::Total) {
        let v = structure_tape(tape, fwd.probs, &m.pairs, weights.reduction)?;
        parts.push((weights.str_, v));
    }
    if matches!(term, Term::Total) {
        let v = param_sq_norm_tape(tape, &m.model.params, vars);
        parts.push((weights.reg, v));
    }
    let mut total = tape.constant(Matrix::scalar(0.0));
    for (w, v) in parts {
        let s = tape.scale(v, w);
        total = tape.add(total, s);
    }
    Ok(total)
}

/// Runs every term on `cfg.seeds` instances. The kernel bandwidth is fixed
/// per instance so that the checked function does not depend on the
/// data-driven bandwidth choice.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.nodes < 4 || cfg.feature_dim < 2 || cfg.classes < 2 {
        return Err(Error::Config(
            "gradcheck needs nodes >= 4, feature_dim >= 2 and classes >= 2".into(),
        ));
    }
    let weights = LossWeights {
        smmd: 0.7,
        cl: 0.9,
        str_: 1.1,
        reg: 1e-2,
        ..LossWeights::default()
    };
    let mut entries = Vec::new();
    for seed in 0..cfg.seeds as u64 {
        let m = micro_instance(cfg, seed)?;
        let kernel = KernelConfig::fixed(1.0 + m.source.cols() as f64 / 2.0);
        for term in Term::ALL {
            let rep = finite_diff_check(&m.model.params, cfg.step, |tape, vars| {
                term_loss(tape, vars, &m, term, &weights, &kernel)
            })?;
            entries.push(GradcheckEntry {
                seed,
                term,
                nodes: m.graph.n(),
                feature_dim: m.graph.feature_dim(),
                classes: m.graph.classes(),
                max_deviation: rep.max_deviation,
                pass: rep.passes(cfg.tolerance),
            });
        }
    }
    let all_pass = entries.iter().all(|e| e.pass);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        step: cfg.step,
        entries,
        all_pass,
    })
}
