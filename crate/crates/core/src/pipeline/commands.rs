//! Command implementations behind the CLI. Each returns a serialisable
//! report; the binary only parses arguments, prints and maps exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_matrix, save_matrix, Checkpoint, CheckpointKind};
use super::config::{EvalSplit, RunConfig, Variant};
use super::finetune::{finetune, predict, Arm, FinetuneOptions, FinetuneOutcome, TargetData};
use super::gradcheck::{run_gradcheck, GradcheckReport};
use super::metrics::{accuracy, mean_std, Confusion, MetricsReport, SeedResult};
use crate::error::{Error, Result};
use crate::graphio::io::atomic_write;
use crate::graphio::{gen_synth, load_graph, make_splits, save_graph, Graph, Splits};
use crate::lora::trainable_parameter_fraction;
use crate::mpnn::{pretrain, BackboneParams};
use crate::numerics::{Matrix, Rng};
use crate::objectives::LossParts;
use crate::theory::{verify_theorems, TheoryReport};

pub const SPLITS_FILE: &str = "splits.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.mat";
pub const LABELS_FILE: &str = "labels.mat";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    atomic_write(path, &serde_json::to_vec_pretty(value)?)
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("checkpoint"))
}

fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.model.clone().unwrap_or_else(|| cfg.output_dir.join("model"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub mode: crate::mpnn::PretrainMode,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub train_accuracy: Option<f64>,
    pub source_sample_rows: usize,
    pub source_rows: usize,
}

/// Pretrains on the source graph and writes the checkpoint together with a
/// uniform sample of `source_sample_rows` source feature rows.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    cfg.pretrain.validate()?;
    let source = load_graph(cfg.require_path(&cfg.source, "source dataset")?)?;
    let out = pretrain(&source, &cfg.pretrain)?;
    let mut rng = Rng::derive(cfg.pretrain.seed, 7);
    let mut rows = rng.sample_indices(source.n(), cfg.source_sample_rows.max(1));
    rows.sort_unstable();
    let sample = source.features().select_rows(&rows);
    let ck = Checkpoint::from_backbone(&out.backbone, cfg.pretrain.mode, sample, source.n());
    let dir = checkpoint_dir(cfg);
    ck.save(&dir)?;
    Ok(PretrainReport {
        checkpoint: dir,
        mode: cfg.pretrain.mode,
        final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
        losses: out.losses,
        train_accuracy: out.train_accuracy,
        source_sample_rows: rows.len(),
        source_rows: source.n(),
    })
}

/// Pretrained backbone and cached source rows.
pub fn load_pretrained(dir: &Path) -> Result<(BackboneParams, Matrix)> {
    let ck = Checkpoint::load(dir)?;
    if ck.manifest.kind != CheckpointKind::Backbone {
        return Err(Error::Config(format!(
            "{} is not a pretrained backbone checkpoint",
            dir.display()
        )));
    }
    let sample = ck
        .source_sample
        .clone()
        .ok_or_else(|| Error::format(dir, "checkpoint has no source feature sample"))?;
    Ok((ck.backbone()?, sample))
}

/// Stored dataset splits when requested and present, otherwise splits drawn
/// under the configured protocol with `seed`.
pub fn splits_for(cfg: &RunConfig, g: &Graph, seed: u64) -> Result<Splits> {
    match (cfg.use_dataset_splits, g.splits()) {
        (true, Some(s)) => Ok(s.clone()),
        (true, None) => Err(Error::Config("dataset has no stored splits".into())),
        _ => make_splits(g, cfg.split, seed),
    }
}

fn options(cfg: &RunConfig, arm: Arm, seed: u64) -> FinetuneOptions {
    FinetuneOptions {
        arm,
        weights: cfg.loss,
        kernel: cfg.kernel,
        lora: cfg.lora.clone(),
        epochs: cfg.epochs,
        patience: cfg.patience,
        lr: cfg.lr,
        seed,
    }
}

/// Runs one arm over every configured seed on shared splits.
pub fn run_arm(
    cfg: &RunConfig,
    backbone: &BackboneParams,
    source: &Matrix,
    target: &TargetData,
    arm: Arm,
    label: &str,
) -> Result<(MetricsReport, Vec<FinetuneOutcome>)> {
    let mut per_seed = Vec::new();
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        let splits = splits_for(cfg, &target.graph, seed)?;
        let out = finetune(backbone, target, &splits, source, &options(cfg, arm, seed))?;
        per_seed.push(SeedResult {
            seed,
            accuracy: out
                .test_accuracy
                .ok_or_else(|| Error::Protocol("split protocol produced no test nodes".into()))?,
            val_accuracy: out.val_accuracy,
            best_epoch: out.best_epoch,
            epochs_run: out.epochs_run,
            wall_clock_s: out.wall_clock_s,
        });
        outcomes.push(out);
    }
    let fraction = outcomes.first().map_or(0.0, |o| o.trainable_fraction);
    let mut report = MetricsReport::from_seeds(label, "test", per_seed, fraction);
    report.source_sample_rows = Some(source.rows());
    report.loss_curves = outcomes.iter().map(|o| o.losses.clone()).collect();
    Ok((report, outcomes))
}

fn load_target(cfg: &RunConfig) -> Result<TargetData> {
    let g = load_graph(cfg.require_path(&cfg.target, "target dataset")?)?;
    TargetData::new(g, &cfg.diffusion)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub metrics: MetricsReport,
    /// Directory of the model fine-tuned with the first seed.
    pub model: PathBuf,
    pub freeze_audit_pass: bool,
}

/// Fine-tunes over every seed, writes the first seed's model (with its
/// splits), the loss log as JSON lines and the metrics report.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<FinetuneReport> {
    cfg.validate()?;
    let (backbone, source) = load_pretrained(cfg.require_path(&cfg.checkpoint, "checkpoint")?)?;
    let target = load_target(cfg)?;
    let arm = Arm::from_flags(&cfg.ablation, cfg.lora.rank);
    let (metrics, outcomes) = run_arm(cfg, &backbone, &source, &target, arm, "GraphLoRA")?;

    let dir = model_dir(cfg);
    let first = &outcomes[0];
    Checkpoint::from_model(&first.model)?.save(&dir)?;
    write_json(&dir.join(SPLITS_FILE), &splits_for(cfg, &target.graph, cfg.seeds[0])?)?;

    let mut log = String::new();
    for (seed, out) in cfg.seeds.iter().zip(&outcomes) {
        for rec in &out.losses {
            let mut v = serde_json::to_value(rec)?;
            v["seed"] = (*seed).into();
            log.push_str(&serde_json::to_string(&v)?);
            log.push('\n');
        }
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    atomic_write(&cfg.output_dir.join("losses.jsonl"), log.as_bytes())?;
    write_json(&cfg.output_dir.join("metrics.json"), &metrics)?;
    Ok(FinetuneReport {
        freeze_audit_pass: outcomes.iter().all(|o| o.freeze.pass),
        metrics,
        model: dir,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub confusion: Confusion,
}

/// Accuracy of a fine-tuned model on one split of the target graph.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = cfg.require_path(&cfg.model, "model")?;
    let model = Checkpoint::load(dir)?.into_model()?;
    let g = load_graph(cfg.require_path(&cfg.target, "target dataset")?)?;
    let split_path = dir.join(SPLITS_FILE);
    let splits: Splits = if split_path.exists() {
        let raw = fs::read(&split_path).map_err(|e| Error::io(&split_path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::format(&split_path, e.to_string()))?
    } else {
        splits_for(cfg, &g, cfg.seeds.first().copied().unwrap_or(0))?
    };
    splits.validate(g.n())?;
    let (name, mask) = match cfg.eval_split {
        EvalSplit::Train => ("train", &splits.train),
        EvalSplit::Val => ("val", &splits.val),
        EvalSplit::Test => ("test", &splits.test),
    };
    let p = crate::graphio::sym_norm_adj(&g);
    let pred = predict(&model, g.features(), &p)?;
    let acc = accuracy(&pred, g.labels(), mask)?;
    let confusion = Confusion::tally(&pred, g.labels(), mask, g.classes())?;
    let seed = SeedResult {
        seed: cfg.seeds.first().copied().unwrap_or(0),
        accuracy: acc,
        val_accuracy: None,
        best_epoch: 0,
        epochs_run: 0,
        wall_clock_s: 0.0,
    };
    Ok(EvalReport {
        metrics: MetricsReport::from_seeds("eval", name, vec![seed], trainable_parameter_fraction(&model)),
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
    pub trainable_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationCheck {
    pub variant: Variant,
    pub expected: Vec<String>,
    pub differing: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub isolation: Vec<IsolationCheck>,
    pub all_isolated: bool,
}

impl AblationReport {
    /// Fixed-width table, one variant per line.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>8} {:>10}\n", "variant", "mean", "std", "trainable");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>8.4} {:>8.4} {:>10.4}\n",
                r.label, r.mean, r.std, r.trainable_fraction
            ));
        }
        s
    }
}

/// Names of loss parts whose step-0 values differ (bitwise).
pub fn differing_parts(a: &LossParts, b: &LossParts) -> Vec<String> {
    let fields = [
        ("cls", a.cls, b.cls),
        ("smmd", a.smmd, b.smmd),
        ("cl", a.cl, b.cl),
        ("str", a.str_, b.str_),
        ("reg", a.reg, b.reg),
    ];
    fields
        .iter()
        .filter(|(_, x, y)| x.to_bits() != y.to_bits())
        .map(|(n, _, _)| n.to_string())
        .collect()
}

/// Runs the full model and the seven variants on shared splits and seeds.
pub fn ablate(
    cfg: &RunConfig,
    backbone: &BackboneParams,
    source: &Matrix,
    target: &TargetData,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut step0: Vec<(Variant, LossParts)> = Vec::new();
    for variant in Variant::ALL {
        let arm = Arm::from_flags(&variant.flags(), cfg.lora.rank);
        let (m, outcomes) = run_arm(cfg, backbone, source, target, arm, variant.label())?;
        step0.push((variant, outcomes[0].losses[0].parts));
        rows.push(AblationRow {
            variant,
            label: variant.label().into(),
            mean: m.mean,
            std: m.std,
            per_seed: m.per_seed.iter().map(|s| s.accuracy).collect(),
            trainable_fraction: m.trainable_fraction,
        });
    }
    let full = step0[0].1;
    let isolation: Vec<IsolationCheck> = step0[1..]
        .iter()
        .map(|(v, parts)| {
            let differing = differing_parts(&full, parts);
            let expected: Vec<String> = v.expected_diff().iter().map(|s| s.to_string()).collect();
            IsolationCheck {
                variant: *v,
                pass: differing == expected,
                expected,
                differing,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        rows,
        all_isolated: isolation.iter().all(|c| c.pass),
        isolation,
    })
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let (backbone, source) = load_pretrained(cfg.require_path(&cfg.checkpoint, "checkpoint")?)?;
    let target = load_target(cfg)?;
    let report = ablate(cfg, &backbone, &source, &target)?;
    write_json(&cfg.output_dir.join("ablation.json"), &report)?;
    Ok(report)
}

pub fn cmd_theory(cfg: &RunConfig) -> Result<TheoryReport> {
    let report = verify_theorems(&cfg.theory)?;
    write_json(&cfg.output_dir.join("theory.json"), &report)?;
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    write_json(&cfg.output_dir.join("gradcheck.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub rows: usize,
    pub cols: usize,
    pub class_separation: f64,
}

/// Final-layer `H_sum` rows of every target node and their labels.
pub fn export_embeddings(model_dir: &Path, g: &Graph) -> Result<Matrix> {
    let model = Checkpoint::load(model_dir)?.into_model()?;
    let p = crate::graphio::sym_norm_adj(g);
    Ok(model.forward(g.features(), &p)?.0.h_sum)
}

pub fn cmd_export_embeddings(cfg: &RunConfig, out: &Path) -> Result<ExportReport> {
    let dir = cfg.require_path(&cfg.model, "model")?;
    let g = load_graph(cfg.require_path(&cfg.target, "target dataset")?)?;
    let emb = export_embeddings(dir, &g)?;
    let labels = Matrix::column(&g.labels().iter().map(|&l| l as f64).collect::<Vec<_>>());
    let (e_path, l_path) = (out.join(EMBEDDINGS_FILE), out.join(LABELS_FILE));
    save_matrix(&e_path, &emb)?;
    save_matrix(&l_path, &labels)?;
    let class_separation = super::metrics::class_separation(&emb, g.labels()).unwrap_or(f64::NAN);
    Ok(ExportReport {
        embeddings: e_path,
        labels: l_path,
        rows: emb.rows(),
        cols: emb.cols(),
        class_separation,
    })
}

/// Reads back an export written by [`cmd_export_embeddings`].
pub fn load_export(dir: &Path) -> Result<(Matrix, Vec<u32>)> {
    let emb = load_matrix(&dir.join(EMBEDDINGS_FILE))?;
    let labels = load_matrix(&dir.join(LABELS_FILE))?;
    if labels.rows() != emb.rows() || labels.cols() != 1 {
        return Err(Error::format(dir, "labels do not match embedding rows"));
    }
    Ok((emb, labels.data().iter().map(|&v| v as u32).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub dir: PathBuf,
    pub nodes: usize,
    pub edges: usize,
    pub homophily: f64,
}

pub fn cmd_gen_synth(cfg: &RunConfig, out: &Path) -> Result<SynthReport> {
    let g = gen_synth(&cfg.synth)?;
    save_graph(&g, out)?;
    Ok(SynthReport {
        dir: out.to_path_buf(),
        nodes: g.n(),
        edges: g.edges().len(),
        homophily: g.edge_homophily(),
    })
}

/// Mean and standard deviation of the test accuracy of several reports,
/// as `mean ± std` in percent.
pub fn format_accuracy(m: &MetricsReport) -> String {
    let accs: Vec<f64> = m.per_seed.iter().map(|s| 100.0 * s.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    format!("{mean:.2} ± {std:.2}")
}
