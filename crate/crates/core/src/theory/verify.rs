//! Batch verification of exact representability and the error bound.

use serde::{Deserialize, Serialize};

use super::bound::{expected_input_norm, theorem2_bound};
use super::instance::{sample_inputs, InstanceSpec, TheoryInstance};
use super::synth::{measure, synthesize_constructive, synthesize_exact, synthesize_optimized, OptimizeConfig};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub name: String,
    pub instance: InstanceSpec,
    /// One batch of `count` instances per rank.
    pub ranks: Vec<usize>,
    pub count: usize,
    pub eval_samples: usize,
    /// When set, each instance must also reach this max-abs output gap.
    pub exact_tol: Option<f64>,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            name: "bound".into(),
            instance: InstanceSpec::default(),
            ranks: vec![1, 2],
            count: 20,
            eval_samples: 1000,
            exact_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    pub seed: u64,
    pub suites: Vec<SuiteSpec>,
    /// Samples for the Monte-Carlo estimate of `E‖X‖_2`.
    pub norm_samples: usize,
    pub optimize: OptimizeConfig,
    /// Relative slack on the bound.
    pub rel_tol: f64,
    /// Absolute floor so that a zero bound admits round-off.
    pub abs_tol: f64,
    /// Test hook: replaces every computed bound with this value.
    pub corrupt_bound: Option<f64>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suites: vec![
                SuiteSpec {
                    name: "exact".into(),
                    instance: InstanceSpec {
                        frozen_layers: 2,
                        target_layers: 2,
                        ..InstanceSpec::default()
                    },
                    ranks: vec![4],
                    count: 20,
                    eval_samples: 100,
                    exact_tol: Some(1e-9),
                },
                SuiteSpec::default(),
            ],
            norm_samples: 10_000,
            optimize: OptimizeConfig::default(),
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            corrupt_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub suite: String,
    pub index: usize,
    pub d: usize,
    pub nodes: usize,
    pub frozen_layers: usize,
    pub target_layers: usize,
    pub block_size: usize,
    pub rank: usize,
    pub method: String,
    #[serde(rename = "E_i")]
    pub e: Vec<f64>,
    pub xi_prime: f64,
    pub bound: f64,
    pub measured: f64,
    pub max_abs_gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedInstance {
    pub suite: String,
    pub index: usize,
    pub rank: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub instances: Vec<InstanceReport>,
    pub skipped: Vec<SkippedInstance>,
    pub all_pass: bool,
}

impl TheoryReport {
    pub fn failures(&self) -> impl Iterator<Item = &InstanceReport> {
        self.instances.iter().filter(|r| !r.pass)
    }
}

/// Pass rule shared by every instance.
pub fn within_bound(measured: f64, bound: f64, rel_tol: f64, abs_tol: f64) -> bool {
    measured <= bound * (1.0 + rel_tol) + abs_tol
}

/// Runs every suite. Instances violating the invertibility assumptions are
/// skipped and listed; everything else is reported with a pass flag.
pub fn verify_theorems(cfg: &TheoryConfig) -> Result<TheoryReport> {
    let mut instances = Vec::new();
    let mut skipped = Vec::new();
    let mut index = 0usize;
    for suite in &cfg.suites {
        for &r in &suite.ranks {
            for _ in 0..suite.count {
                let mut rng = Rng::derive(cfg.seed, index as u64);
                let spec = InstanceSpec {
                    rank: r,
                    ..suite.instance
                };
                let inst = TheoryInstance::random(&spec, &mut rng)?;
                match run_instance(cfg, suite, index, &inst, &mut rng) {
                    Ok(rep) => instances.push(rep),
                    Err(Error::Condition(reason)) => skipped.push(SkippedInstance {
                        suite: suite.name.clone(),
                        index,
                        rank: r,
                        reason,
                    }),
                    Err(e) => return Err(e),
                }
                index += 1;
            }
        }
    }
    let all_pass = instances.iter().all(|r| r.pass);
    Ok(TheoryReport {
        instances,
        skipped,
        all_pass,
    })
}

fn run_instance(
    cfg: &TheoryConfig,
    suite: &SuiteSpec,
    index: usize,
    inst: &TheoryInstance,
    rng: &mut Rng,
) -> Result<InstanceReport> {
    let (d, n) = (inst.d(), inst.nodes());
    let ex = expected_input_norm(d, n, cfg.norm_samples, rng)?;
    let mut parts = theorem2_bound(inst, ex)?;
    if let Some(b) = cfg.corrupt_bound {
        parts.bound = b;
    }
    let eval = sample_inputs(d, n, suite.eval_samples.max(1), rng);

    let exact_ok = inst.block_size() == 1 && inst.frozen_layers() == inst.target_layers();
    let (method, ad, m) = match exact_ok.then(|| synthesize_exact(inst)) {
        Some(Ok(ad)) => {
            let m = measure(inst, &ad, &eval)?;
            ("exact", ad, m)
        }
        _ => {
            let warm = synthesize_constructive(inst, &eval)?;
            let (ad, m) = synthesize_optimized(inst, &warm, &eval, &cfg.optimize, rng)?;
            ("optimized", ad, m)
        }
    };
    if ad.max_rank()? > inst.rank {
        return Err(Error::Verification(format!(
            "instance {index}: synthesized update exceeds rank {}",
            inst.rank
        )));
    }
    let mut pass = within_bound(m.mean_norm, parts.bound, cfg.rel_tol, cfg.abs_tol);
    if let Some(tol) = suite.exact_tol {
        pass &= m.max_abs <= tol;
    }
    Ok(InstanceReport {
        suite: suite.name.clone(),
        index,
        d,
        nodes: n,
        frozen_layers: inst.frozen_layers(),
        target_layers: inst.target_layers(),
        block_size: inst.block_size(),
        rank: inst.rank,
        method: method.into(),
        e: parts.e,
        xi_prime: parts.xi_prime,
        bound: parts.bound,
        measured: m.mean_norm,
        max_abs_gap: m.max_abs,
        pass,
    })
}
