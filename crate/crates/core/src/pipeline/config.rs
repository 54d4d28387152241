use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::{DiffusionConfig, SplitProtocol, SynthSpec};
use crate::lora::{AdapterKind, LoraConfig};
use crate::mpnn::PretrainConfig;
use crate::objectives::{KernelConfig, LossWeights};
use crate::theory::TheoryConfig;

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "GRAPHLORA_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Plain MMD instead of the structure-weighted variant.
    pub use_mmd: bool,
    pub disable_smmd: bool,
    pub disable_cl: bool,
    pub disable_str: bool,
    /// Unfactorised weight update instead of `W_B W_A`.
    pub disable_lowrank: bool,
    pub disable_projector: bool,
    pub disable_lora_branch: bool,
}

impl AblationFlags {
    pub fn adapter_kind(&self, rank: usize) -> AdapterKind {
        if self.disable_lora_branch {
            AdapterKind::Disabled
        } else if self.disable_lowrank {
            AdapterKind::Full
        } else {
            AdapterKind::LowRank { rank }
        }
    }

    pub fn smmd_active(&self) -> bool {
        !self.disable_smmd && !self.disable_projector
    }

    pub fn cl_active(&self) -> bool {
        !self.disable_cl && !self.disable_lora_branch
    }

    pub fn str_active(&self) -> bool {
        !self.disable_str
    }
}

/// The full model and the seven ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    WithMmd,
    NoSmmd,
    NoCl,
    NoStr,
    NoLrd,
    NoNfa,
    NoSktl,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::WithMmd,
        Variant::NoSmmd,
        Variant::NoCl,
        Variant::NoStr,
        Variant::NoLrd,
        Variant::NoNfa,
        Variant::NoSktl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "GraphLoRA",
            Variant::WithMmd => "w/ mmd",
            Variant::NoSmmd => "w/o smmd",
            Variant::NoCl => "w/o cl",
            Variant::NoStr => "w/o str",
            Variant::NoLrd => "w/o lrd",
            Variant::NoNfa => "w/o nfa",
            Variant::NoSktl => "w/o sktl",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let none = AblationFlags::default();
        match self {
            Variant::Full => none,
            Variant::WithMmd => AblationFlags { use_mmd: true, ..none },
            Variant::NoSmmd => AblationFlags { disable_smmd: true, ..none },
            Variant::NoCl => AblationFlags { disable_cl: true, ..none },
            Variant::NoStr => AblationFlags { disable_str: true, ..none },
            Variant::NoLrd => AblationFlags { disable_lowrank: true, ..none },
            Variant::NoNfa => AblationFlags {
                disable_projector: true,
                disable_smmd: true,
                ..none
            },
            Variant::NoSktl => AblationFlags {
                disable_lora_branch: true,
                disable_cl: true,
                ..none
            },
        }
    }

    /// Loss-part fields expected to differ from the full model at step 0.
    /// Architectural changes also change the parameter norm.
    pub fn expected_diff(self) -> &'static [&'static str] {
        match self {
            Variant::Full => &[],
            Variant::WithMmd | Variant::NoSmmd => &["smmd"],
            Variant::NoCl => &["cl"],
            Variant::NoStr => &["str"],
            Variant::NoLrd => &["reg"],
            Variant::NoNfa => &["smmd", "reg"],
            Variant::NoSktl => &["cl", "reg"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub nodes: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub tolerance: f64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            nodes: 12,
            feature_dim: 6,
            classes: 3,
            tolerance: 1e-5,
            step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Source graph directory (pretraining).
    pub source: Option<PathBuf>,
    /// Target graph directory (fine-tuning, evaluation, export).
    pub target: Option<PathBuf>,
    /// Pretrained backbone checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Fine-tuned model directory.
    pub model: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub loss: LossWeights,
    pub kernel: KernelConfig,
    pub diffusion: DiffusionConfig,
    pub split: SplitProtocol,
    /// Use the dataset's stored splits instead of drawing them per seed.
    pub use_dataset_splits: bool,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub ablation: AblationFlags,
    /// Rows of source features bundled with a pretrained checkpoint.
    pub source_sample_rows: usize,
    pub eval_split: EvalSplit,
    pub theory: TheoryConfig,
    pub gradcheck: GradcheckConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            checkpoint: None,
            model: None,
            output_dir: PathBuf::from("runs"),
            pretrain: PretrainConfig::default(),
            lora: LoraConfig::default(),
            loss: LossWeights::default(),
            kernel: KernelConfig::default(),
            diffusion: DiffusionConfig::default(),
            split: SplitProtocol::default(),
            use_dataset_splits: false,
            epochs: 200,
            patience: 50,
            lr: 5e-3,
            seeds: vec![0, 1, 2, 3, 4],
            ablation: AblationFlags::default(),
            source_sample_rows: 2048,
            eval_split: EvalSplit::Test,
            theory: TheoryConfig::default(),
            gradcheck: GradcheckConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Applies the output-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr={} must be positive", self.lr)));
        }
        if self.lora.rank == 0 {
            return Err(Error::Config("lora.rank must be at least 1".into()));
        }
        self.pretrain.validate()?;
        self.loss.validate()?;
        self.kernel.validate()?;
        self.diffusion.validate()?;
        Ok(())
    }

    pub fn require_path<'a>(&self, p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        let path = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{what} path is not set")))?;
        if !path.exists() {
            return Err(Error::Config(format!("{what} path {} does not exist", path.display())));
        }
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"epochs": 7, "loss": {"cl": 0.5}}"#).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.loss.cl, 0.5);
        assert_eq!(cfg.loss.smmd, 1.0);
        assert_eq!(cfg.lora.rank, 32);
        assert_eq!(cfg.source_sample_rows, 2048);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(RunConfig::from_json_str(r#"{"split": {"kind": "bogus"}}"#).is_err());
        let bad = RunConfig {
            epochs: 0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_flags() {
        let nfa = Variant::NoNfa.flags();
        assert!(nfa.disable_projector && !nfa.smmd_active());
        let sktl = Variant::NoSktl.flags();
        assert_eq!(sktl.adapter_kind(8), AdapterKind::Disabled);
        assert!(!sktl.cl_active());
        assert_eq!(Variant::NoLrd.flags().adapter_kind(8), AdapterKind::Full);
        assert_eq!(Variant::Full.flags().adapter_kind(8), AdapterKind::LowRank { rank: 8 });
        assert_eq!(Variant::ALL.len(), 8);
    }
}
