//! Acceptance criteria. Every test prints exactly one line of the form
//! `criterion N: PASS|FAIL|SKIP <details>` and then asserts the gate.

use std::time::Instant;

use graphlora::graphio::{
    gen_synth, load_graph, make_splits, ppr_diffusion, save_graph, DiffusionConfig, DiffusionMode,
    Graph, SplitProtocol, SynthSpec,
};
use graphlora::mpnn::{pretrain, BackboneParams, PretrainConfig, PretrainMode};
use graphlora::numerics::{Matrix, Rng};
use graphlora::objectives::{mmd, smmd, smmd_gamma, KernelConfig};
use graphlora::pipeline::{
    self, finetune, run_arm, AblationFlags, Arm, Checkpoint, FinetuneOptions, GradcheckConfig,
    RunConfig, TargetData, Variant,
};
use graphlora::theory::{verify_theorems, SuiteSpec, TheoryConfig};

fn report(n: u32, pass: bool, details: &str) {
    println!("criterion {n}: {} {details}", if pass { "PASS" } else { "FAIL" });
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let cfg = GradcheckConfig {
        seeds: 10,
        nodes: 20,
        feature_dim: 8,
        classes: 4,
        tolerance: 1e-5,
        step: 1e-6,
    };
    let rep = pipeline::run_gradcheck(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = rep.entries.iter().map(|e| e.max_deviation).fold(0.0, f64::max);
    let pass = rep.all_pass && rep.entries.len() == 60 && secs < 60.0;
    report(
        1,
        pass,
        &format!("{} checks, worst relative deviation {worst:.2e} (tol 1e-5), {secs:.1}s", rep.entries.len()),
    );
    assert!(pass);
}

fn random_graph(rng: &mut Rng) -> Graph {
    let n = 2 + rng.below(49);
    let p = 0.05 + 0.4 * rng.uniform();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.bernoulli(p) {
                edges.push((u as u32, v as u32));
            }
        }
    }
    Graph::new(n, edges, Matrix::zeros(n, 1), vec![0; n], 1).unwrap()
}

#[test]
fn criterion_2_ppr_closed_form_matches_series() {
    let started = Instant::now();
    let mut rng = Rng::new(2);
    let graphs: Vec<Graph> = (0..20).map(|_| random_graph(&mut rng)).collect();
    let mut worst = Vec::new();
    for alpha in [0.05, 0.15, 0.5] {
        let mut w: f64 = 0.0;
        for g in &graphs {
            let closed = DiffusionConfig {
                alpha,
                mode: DiffusionMode::ClosedForm,
                ..DiffusionConfig::default()
            };
            let series = DiffusionConfig {
                mode: DiffusionMode::TruncatedSeries,
                truncation_order: 200,
                ..closed
            };
            let a = ppr_diffusion(g, &closed).unwrap();
            let b = ppr_diffusion(g, &series).unwrap();
            w = w.max(a.max_abs_diff(&b));
        }
        worst.push((alpha, w));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&(_, w)| w <= 1e-8) && secs < 30.0;
    let detail: Vec<String> = worst.iter().map(|(a, w)| format!("alpha={a}: {w:.2e}")).collect();
    report(2, pass, &format!("max-abs gap {} (tol 1e-8), {secs:.1}s", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_3_mmd_identities() {
    let mut rng = Rng::new(3);
    let x = rng.gaussian_matrix(40, 5, 1.0);
    let zt = rng.gaussian_matrix(30, 5, 1.0);
    let xs = rng.gaussian_matrix(35, 5, 1.3);
    let cfg = KernelConfig::default();
    let self_mmd = mmd(&x, &x, &cfg).unwrap();
    let uniform = Matrix::filled(30, 30, 0.37);
    let gap = (smmd(&zt, &xs, &uniform, &cfg).unwrap() - mmd(&zt, &xs, &cfg).unwrap()).abs();
    let g = smmd_gamma(&Matrix::from_rows(&[vec![1.0, 0.5]]));
    let (e1, e2) = ((g[(0, 0)] - 2f64.ln()).abs(), (g[(0, 1)] - 3f64.ln()).abs());
    let pass = self_mmd.abs() <= 1e-12 && gap <= 1e-12 && e1 <= 1e-12 && e2 <= 1e-12;
    report(
        3,
        pass,
        &format!("mmd(X,X)={self_mmd:.1e}, uniform-gamma gap {gap:.1e}, gamma(1) err {e1:.1e}, gamma(0.5) err {e2:.1e}"),
    );
    assert!(pass);
}

fn suite(name: &str) -> SuiteSpec {
    TheoryConfig::default()
        .suites
        .into_iter()
        .find(|s| s.name == name)
        .expect("default suite")
}

#[test]
fn criterion_4_exact_representation() {
    let started = Instant::now();
    let s = suite("exact");
    assert_eq!((s.instance.d, s.instance.frozen_layers, s.instance.target_layers), (4, 2, 2));
    assert_eq!((s.ranks.as_slice(), s.count, s.eval_samples), (&[4][..], 20, 100));
    let cfg = TheoryConfig {
        suites: vec![s],
        ..TheoryConfig::default()
    };
    let rep = verify_theorems(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = rep.instances.iter().map(|r| r.max_abs_gap).fold(0.0, f64::max);
    let pass = rep.instances.len() == 20 && rep.instances.iter().all(|r| r.max_abs_gap <= 1e-9) && secs < 30.0;
    report(
        4,
        pass,
        &format!(
            "{} instances ({} skipped), worst output gap {worst:.2e} (tol 1e-9), {secs:.1}s",
            rep.instances.len(),
            rep.skipped.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_error_bound() {
    let started = Instant::now();
    let s = suite("bound");
    assert_eq!((s.instance.d, s.instance.frozen_layers, s.instance.target_layers), (4, 4, 2));
    assert_eq!((s.ranks.as_slice(), s.count), (&[1, 2][..], 20));
    let cfg = TheoryConfig {
        suites: vec![s],
        ..TheoryConfig::default()
    };
    let rep = verify_theorems(&cfg).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = rep
        .instances
        .iter()
        .filter(|r| r.bound > 1e-12)
        .map(|r| r.measured / r.bound)
        .fold(0.0, f64::max);
    let pass = rep.instances.len() == 40 && rep.all_pass && secs < 300.0;
    report(
        5,
        pass,
        &format!(
            "{} instances ({} skipped), {} violations, worst measured/bound {worst:.3} (bounds above 1e-12), {secs:.1}s",
            rep.instances.len(),
            rep.skipped.len(),
            rep.failures().count()
        ),
    );
    assert!(pass);
}

/// Source and target graphs of the desk-scale transfer benchmark.
fn transfer_pair(seed: u64) -> (Graph, Graph) {
    let base = SynthSpec {
        nodes_per_class: 200,
        classes: 2,
        feature_dim: 16,
        separation: 1.0,
        noise: 1.0,
        prototype_seed: seed,
        ..SynthSpec::default()
    };
    let source = gen_synth(&SynthSpec {
        p_intra: 0.1,
        p_inter: 0.02,
        seed: seed * 2 + 1,
        ..base.clone()
    })
    .unwrap();
    let target = gen_synth(&SynthSpec {
        p_intra: 0.06,
        p_inter: 0.03,
        rotation_deg: 30.0,
        shift: 6.0,
        seed: seed * 2 + 2,
        ..base
    })
    .unwrap();
    (source, target)
}

fn transfer_config() -> RunConfig {
    RunConfig {
        pretrain: PretrainConfig {
            mode: PretrainMode::Contrastive,
            hidden_dims: vec![64, 32],
            epochs: 100,
            lr: 5e-3,
            ..PretrainConfig::default()
        },
        lora: graphlora::lora::LoraConfig {
            rank: 8,
            ..Default::default()
        },
        split: SplitProtocol::KShot { k: 10 },
        epochs: 100,
        patience: 0,
        lr: 1e-2,
        seeds: vec![0, 1, 2, 3, 4],
        ..RunConfig::default()
    }
}

fn pretrained(cfg: &RunConfig, source: &Graph) -> (BackboneParams, Matrix) {
    let out = pretrain(source, &cfg.pretrain).unwrap();
    let mut rng = Rng::derive(cfg.pretrain.seed, 7);
    let mut rows = rng.sample_indices(source.n(), cfg.source_sample_rows);
    rows.sort_unstable();
    (out.backbone, source.features().select_rows(&rows))
}

#[test]
fn criterion_6_freeze_invariant() {
    let (source, target) = transfer_pair(0);
    let mut cfg = transfer_config();
    cfg.pretrain.epochs = 20;
    let (backbone, sample) = pretrained(&cfg, &source);
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_backbone(&backbone, cfg.pretrain.mode, sample.clone(), source.n())
        .save(dir.path())
        .unwrap();
    let (loaded, sample) = pipeline::load_pretrained(dir.path()).unwrap();

    let data = TargetData::new(target, &cfg.diffusion).unwrap();
    let splits = make_splits(&data.graph, cfg.split, 0).unwrap();
    let opts = FinetuneOptions {
        arm: Arm::from_flags(&AblationFlags::default(), cfg.lora.rank),
        weights: cfg.loss,
        kernel: cfg.kernel,
        lora: cfg.lora.clone(),
        epochs: 60,
        patience: 0,
        lr: cfg.lr,
        seed: 0,
    };
    let out = finetune(&loaded, &data, &splits, &sample, &opts).unwrap();
    let after = out.model.backbone().unwrap();
    let bytes_equal = loaded
        .layers
        .iter()
        .zip(&after.layers)
        .all(|(a, b)| a.weight.to_bytes() == b.weight.to_bytes() && a.bias == b.bias);
    let trained = out.model.params.trainable().count();
    let pass = bytes_equal && out.freeze.pass && out.freeze.probe_identical && trained > 0;
    report(
        6,
        pass,
        &format!(
            "frozen tensors byte-identical: {bytes_equal}, probe outputs bit-identical: {}, digest {}..",
            out.freeze.probe_identical,
            &out.freeze.digest_after[..12]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_transfer_trend() {
    let started = Instant::now();
    let cfg = transfer_config();
    let (source, target) = transfer_pair(0);
    let (backbone, sample) = pretrained(&cfg, &source);
    let data = TargetData::new(target, &cfg.diffusion).unwrap();
    let full = Arm::from_flags(&AblationFlags::default(), cfg.lora.rank);
    let no_nfa = Arm::from_flags(&Variant::NoNfa.flags(), cfg.lora.rank);
    let (m_full, _) = run_arm(&cfg, &backbone, &sample, &data, full, "GraphLoRA").unwrap();
    let (m_base, _) = run_arm(&cfg, &backbone, &sample, &data, Arm::direct_transfer(), "direct").unwrap();
    let (m_nfa, _) = run_arm(&cfg, &backbone, &sample, &data, no_nfa, "w/o nfa").unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pts = |m: &graphlora::pipeline::MetricsReport| 100.0 * m.mean;
    let (f, b, n) = (pts(&m_full), pts(&m_base), pts(&m_nfa));
    let pass = f >= b + 3.0 && f >= n + 3.0 && secs < 600.0;
    report(
        7,
        pass,
        &format!(
            "GraphLoRA {f:.2} vs direct transfer {b:.2} ({:+.2}) and w/o nfa {n:.2} ({:+.2}), need +3.00, {secs:.1}s",
            f - b,
            f - n
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_ablation_machinery() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target) = transfer_pair(1);
    let (src_dir, tgt_dir) = (dir.path().join("source"), dir.path().join("target"));
    save_graph(&source, &src_dir).unwrap();
    save_graph(&target, &tgt_dir).unwrap();
    let mut cfg = transfer_config();
    cfg.source = Some(src_dir);
    cfg.target = Some(tgt_dir);
    cfg.checkpoint = Some(dir.path().join("checkpoint"));
    cfg.output_dir = dir.path().join("out");
    cfg.pretrain.epochs = 20;
    cfg.epochs = 20;
    cfg.seeds = vec![0, 1];
    pipeline::cmd_pretrain(&cfg).unwrap();
    let rep = pipeline::cmd_ablate(&cfg).unwrap();

    let written: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.output_dir.join("ablation.json")).unwrap()).unwrap();
    let variants: Vec<Variant> = rep.rows.iter().map(|r| r.variant).collect();
    let shared_seeds = rep.rows.iter().all(|r| r.per_seed.len() == 2);
    let failed: Vec<String> = rep
        .isolation
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{:?} differs in {:?}", c.variant, c.differing))
        .collect();
    let pass = variants == Variant::ALL
        && shared_seeds
        && rep.isolation.len() == 7
        && rep.all_isolated
        && written["rows"].as_array().map(Vec::len) == Some(8);
    report(
        8,
        pass,
        &format!(
            "{} rows on seeds {:?}, isolation {}/7{}",
            rep.rows.len(),
            rep.seeds,
            rep.isolation.iter().filter(|c| c.pass).count(),
            if failed.is_empty() { String::new() } else { format!(" ({})", failed.join("; ")) }
        ),
    );
    assert!(pass);
}

/// Non-gating: needs a converted Cora directory (with its public split in
/// `splits.json`) in `GRAPHLORA_CORA_DIR`. Reference accuracy 82.42 ± 0.40.
#[test]
fn criterion_9_cora_smoke_run() {
    let Some(dir) = std::env::var_os("GRAPHLORA_CORA_DIR") else {
        println!("criterion 9: SKIP GRAPHLORA_CORA_DIR not set (informational, non-gating)");
        return;
    };
    let cora = load_graph(std::path::Path::new(&dir)).unwrap();
    let cfg = RunConfig {
        use_dataset_splits: true,
        seeds: vec![0],
        epochs: 200,
        patience: 50,
        ..RunConfig::default()
    };
    let (backbone, sample) = pretrained(&cfg, &cora);
    let data = TargetData::new(cora, &cfg.diffusion).unwrap();
    let arm = Arm::from_flags(&AblationFlags::default(), cfg.lora.rank);
    let (m, _) = run_arm(&cfg, &backbone, &sample, &data, arm, "GraphLoRA").unwrap();
    let pass = m.mean >= 0.70;
    println!(
        "criterion 9: {} test accuracy {:.2} (gate 70.00, reference 82.42 ± 0.40; non-gating)",
        if pass { "PASS" } else { "FAIL" },
        100.0 * m.mean
    );
}
