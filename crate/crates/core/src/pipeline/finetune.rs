//! The fine-tuning loop: projector, both branches, the combined objective
//! and early stopping on validation accuracy.

use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::frozen_digest;
use super::config::AblationFlags;
use super::metrics::{accuracy, LossRecord};
use crate::error::{Error, Result};
use crate::graphio::{ppr_diffusion, sym_norm_adj, DiffusionConfig, Graph, Splits};
use crate::lora::{
    model_forward_tape, project_features, trainable_parameter_fraction, AdaptedModel, AdapterKind,
    LoraConfig, PROJECTOR_BIAS, PROJECTOR_WEIGHT,
};
use crate::mpnn::{argmax, forward, BackboneParams};
use crate::numerics::{grad_of, AdamConfig, AdamState, GradScope, Matrix, Rng, Tape, Var};
use crate::objectives::{
    classification_tape, contrastive_tape, param_sq_norm_tape, sample_batch, sample_pairs,
    smmd_gamma, smmd_tape, structure_tape, ContrastiveConfig, KernelConfig, LossParts, LossWeights,
    PositiveSets,
};

/// Rows of the probe batch used by the freeze audit.
pub const PROBE_ROWS: usize = 64;

/// A target graph with everything the loop precomputes once.
#[derive(Debug, Clone)]
pub struct TargetData {
    pub graph: Graph,
    pub prop: Rc<Matrix>,
    /// `log(1 + 1/S)` of the PPR diffusion, all node pairs.
    pub gamma: Matrix,
}

impl TargetData {
    pub fn new(graph: Graph, diffusion: &DiffusionConfig) -> Result<Self> {
        let prop = Rc::new(sym_norm_adj(&graph));
        let gamma = smmd_gamma(&ppr_diffusion(&graph, diffusion)?);
        Ok(Self { graph, prop, gamma })
    }
}

/// Which components and loss terms a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub adapter: AdapterKind,
    pub projector: bool,
    pub smmd: bool,
    /// Plain MMD in place of the structure-weighted version.
    pub plain_mmd: bool,
    pub cl: bool,
    pub str_: bool,
    pub reg: bool,
}

impl Arm {
    pub fn from_flags(flags: &AblationFlags, rank: usize) -> Self {
        Self {
            adapter: flags.adapter_kind(rank),
            projector: !flags.disable_projector,
            smmd: flags.smmd_active(),
            plain_mmd: flags.use_mmd,
            cl: flags.cl_active(),
            str_: flags.str_active(),
            reg: true,
        }
    }

    /// Frozen backbone with a trainable linear head and only the
    /// classification loss.
    pub fn direct_transfer() -> Self {
        Self {
            adapter: AdapterKind::Disabled,
            projector: false,
            smmd: false,
            plain_mmd: false,
            cl: false,
            str_: false,
            reg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub arm: Arm,
    pub weights: LossWeights,
    pub kernel: KernelConfig,
    pub lora: LoraConfig,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    /// Seeds initialisation and every per-step sample.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub digest_before: String,
    pub digest_after: String,
    pub probe_identical: bool,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters of the best-validation epoch.
    pub model: AdaptedModel,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Validation accuracy of every candidate (index 0 is the initial model).
    pub val_history: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub losses: Vec<LossRecord>,
    pub freeze: FreezeAudit,
    pub trainable_fraction: f64,
    pub wall_clock_s: f64,
}

/// Predicted class of every node.
pub fn predict(model: &AdaptedModel, x: &Matrix, p: &Matrix) -> Result<Vec<usize>> {
    let (_, logits) = model.forward(x, p)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

fn sub_square(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

struct StepInputs<'a> {
    x: Rc<Matrix>,
    target: &'a TargetData,
    source: &'a Matrix,
    splits: &'a Splits,
    positives: &'a PositiveSets,
    batch_t: Vec<usize>,
    batch_s: Vec<usize>,
    pairs: crate::objectives::PairSample,
}

/// Builds the objective on `tape`; returns the total and the unweighted
/// parts. Inactive terms contribute and report zero.
fn objective(
    tape: &mut Tape,
    vars: &crate::numerics::ParamVars,
    model: &AdaptedModel,
    opts: &FinetuneOptions,
    inp: &StepInputs<'_>,
) -> Result<(Var, [Option<Var>; 5])> {
    let w = &opts.weights;
    let arm = &opts.arm;
    let fwd = model_forward_tape(tape, inp.x.clone(), inp.target.prop.clone(), vars, &model.arch);
    let labels = inp.target.graph.labels();
    let cls = classification_tape(tape, fwd.probs, labels, &inp.splits.train)?;
    let mut total = cls;

    let smmd = if arm.smmd {
        let zt = tape.gather_rows(fwd.z, Rc::new(inp.batch_t.clone()));
        let xs = inp.source.select_rows(&inp.batch_s);
        let gamma = (!arm.plain_mmd).then(|| sub_square(&inp.target.gamma, &inp.batch_t));
        let v = smmd_tape(tape, zt, &xs, gamma.as_ref(), &opts.kernel)?;
        let s = tape.scale(v, w.smmd);
        total = tape.add(total, s);
        Some(v)
    } else {
        None
    };

    let cl = match (arm.cl, fwd.lora.h_prime) {
        (true, Some(hp)) => {
            let cfg = ContrastiveConfig {
                temperature: w.temperature,
                epsilon: w.epsilon,
                reduction: w.reduction,
            };
            let v = contrastive_tape(tape, fwd.lora.h, hp, &inp.batch_t, inp.positives, &cfg)?;
            let s = tape.scale(v, w.cl);
            total = tape.add(total, s);
            Some(v)
        }
        _ => None,
    };

    let str_ = if arm.str_ {
        let v = structure_tape(tape, fwd.probs, &inp.pairs, w.reduction)?;
        let s = tape.scale(v, w.str_);
        total = tape.add(total, s);
        Some(v)
    } else {
        None
    };

    let reg = if arm.reg {
        let v = param_sq_norm_tape(tape, &model.params, vars);
        let s = tape.scale(v, w.reg);
        total = tape.add(total, s);
        Some(v)
    } else {
        None
    };
    Ok((total, [Some(cls), smmd, cl, str_, reg]))
}

fn probe_outputs(backbone: &BackboneParams, z: &Matrix, p: &Matrix) -> Result<Vec<Matrix>> {
    let rows: Vec<usize> = (0..z.rows().min(PROBE_ROWS)).collect();
    let zp = z.select_rows(&rows);
    let pp = sub_square(p, &rows);
    forward(&zp, &pp, backbone)
}

fn bits(ms: &[Matrix]) -> Vec<u64> {
    ms.iter()
        .flat_map(|m| m.data().iter().map(|v| v.to_bits()))
        .collect()
}

/// Fine-tunes adapters, projector and head on `target` over `splits`.
///
/// `source` holds the cached source feature rows used by the
/// distribution-matching term. Fails with a verification error if any
/// frozen tensor or the probe output of the frozen backbone changes.
pub fn finetune(
    backbone: &BackboneParams,
    target: &TargetData,
    splits: &Splits,
    source: &Matrix,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    let started = Instant::now();
    let g = &target.graph;
    splits.validate(g.n())?;
    if splits.train.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs labelled training nodes".into()));
    }
    if opts.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    opts.weights.validate()?;
    opts.kernel.validate()?;
    if opts.arm.smmd && source.cols() != backbone.input_dim() {
        return Err(Error::Contract(format!(
            "source sample has {} columns, backbone expects {}",
            source.cols(),
            backbone.input_dim()
        )));
    }
    if opts.arm.smmd && source.rows() == 0 {
        return Err(Error::InvalidInput("empty source feature sample".into()));
    }

    let lora = LoraConfig {
        seed: opts.seed,
        ..opts.lora.clone()
    };
    let mut model = AdaptedModel::new(
        backbone,
        g.feature_dim(),
        g.classes(),
        opts.arm.adapter,
        opts.arm.projector,
        &lora,
    )?;
    let x = Rc::new(g.features().clone());
    let positives = PositiveSets::from_labels(g.n(), g.labels(), &splits.train)?;

    let z0 = if opts.arm.projector {
        project_features(
            &x,
            model.params.value(PROJECTOR_WEIGHT),
            Some(model.params.value(PROJECTOR_BIAS)),
        )?
    } else {
        (*x).clone()
    };
    let digest_before = frozen_digest(&model.params);
    let probe_before = bits(&probe_outputs(&model.backbone()?, &z0, &target.prop)?);

    let selection: &[usize] = if splits.val.is_empty() {
        &splits.train
    } else {
        &splits.val
    };
    let score = |m: &AdaptedModel| -> Result<f64> {
        accuracy(&predict(m, &x, &target.prop)?, g.labels(), selection)
    };

    let mut adam = AdamState::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let mut rng = Rng::derive(opts.seed, 100);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = score(&model)?;
    let mut val_history = vec![best_score];
    let mut losses = Vec::with_capacity(opts.epochs);
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 0..opts.epochs {
        let n_s = source.rows();
        let (batch_t, batch_s) = sample_batch(g.n(), n_s, opts.weights.batch_size, &mut rng);
        let pairs = sample_pairs(g, opts.weights.negatives_per_edge, &mut rng);
        let inputs = StepInputs {
            x: x.clone(),
            target,
            source,
            splits,
            positives: &positives,
            batch_t,
            batch_s,
            pairs,
        };
        let mut parts = [0.0f64; 5];
        let (total, grads) = grad_of(&model.params, GradScope::TrainableOnly, |tape, vars| {
            let (total, terms) = objective(tape, vars, &model, opts, &inputs)?;
            for (slot, t) in parts.iter_mut().zip(terms) {
                *slot = t.map_or(0.0, |v| tape.scalar(v));
            }
            Ok(total)
        })
        .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
        losses.push(LossRecord {
            step: epoch,
            parts: LossParts {
                cls: parts[0],
                smmd: parts[1],
                cl: parts[2],
                str_: parts[3],
                reg: parts[4],
            },
            total,
        });
        adam.step(&mut model.params, &grads)?;
        epochs_run = epoch + 1;

        let s = score(&model)?;
        val_history.push(s);
        if s > best_score {
            best_score = s;
            best = model.clone();
            best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if opts.patience > 0 && since_best >= opts.patience {
                break;
            }
        }
    }

    let digest_after = frozen_digest(&model.params);
    let probe_after = bits(&probe_outputs(&model.backbone()?, &z0, &target.prop)?);
    let probe_identical = probe_before == probe_after;
    let freeze = FreezeAudit {
        pass: digest_before == digest_after && probe_identical,
        digest_before,
        digest_after,
        probe_identical,
    };
    if !freeze.pass {
        return Err(Error::Verification(format!("freeze audit failed: {freeze:?}")));
    }

    let pred = predict(&best, &x, &target.prop)?;
    let train_accuracy = accuracy(&pred, g.labels(), &splits.train)?;
    let val_accuracy = (!splits.val.is_empty())
        .then(|| accuracy(&pred, g.labels(), &splits.val))
        .transpose()?;
    let test_accuracy = (!splits.test.is_empty())
        .then(|| accuracy(&pred, g.labels(), &splits.test))
        .transpose()?;
    Ok(FinetuneOutcome {
        trainable_fraction: trainable_parameter_fraction(&best),
        model: best,
        best_epoch,
        epochs_run,
        val_history,
        val_accuracy,
        train_accuracy,
        test_accuracy,
        losses,
        freeze,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
