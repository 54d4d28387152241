use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use graphlora::mpnn::PretrainMode;
use graphlora::pipeline::{self, EvalSplit, RunConfig, OUTPUT_DIR_ENV};
use graphlora::Error;

#[derive(Parser)]
#[command(name = "graphlora", version, about = "Low-rank cross-graph transfer for GNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone on the source graph and write a checkpoint.
    Pretrain(Common),
    /// Fine-tune adapters, projector and head on the target graph.
    Finetune(Common),
    /// Evaluate a fine-tuned model on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_split)]
        split: Option<EvalSplit>,
    },
    /// Run the full model and all seven ablation variants.
    Ablate(Common),
    /// Numerically check the expressivity results.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Replace every computed bound (negative control).
        #[arg(long)]
        corrupt_bound: Option<f64>,
    },
    /// Finite-difference check of every loss term.
    Gradcheck(Common),
    /// Write final-layer embeddings and labels of the target graph.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-partition dataset.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_mode)]
    pretrain_mode: Option<PretrainMode>,
    #[arg(long)]
    use_mmd: bool,
    #[arg(long)]
    disable_smmd: bool,
    #[arg(long)]
    disable_cl: bool,
    #[arg(long)]
    disable_str: bool,
    #[arg(long)]
    disable_lowrank: bool,
    #[arg(long)]
    disable_projector: bool,
    #[arg(long)]
    disable_lora_branch: bool,
}

fn parse_split(s: &str) -> Result<EvalSplit, String> {
    match s {
        "train" => Ok(EvalSplit::Train),
        "val" => Ok(EvalSplit::Val),
        "test" => Ok(EvalSplit::Test),
        _ => Err(format!("unknown split {s:?} (train, val, test)")),
    }
}

fn parse_mode(s: &str) -> Result<PretrainMode, String> {
    match s {
        "supervised" => Ok(PretrainMode::Supervised),
        "contrastive" => Ok(PretrainMode::Contrastive),
        _ => Err(format!("unknown pretrain mode {s:?} (supervised, contrastive)")),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        // clap already folds the environment variable into `output_dir`.
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = &self.$field {
                    $($target)+ = v.clone().into();
                }
            };
        }
        set!(source => cfg.source);
        set!(target => cfg.target);
        set!(checkpoint => cfg.checkpoint);
        set!(model => cfg.model);
        set!(epochs => cfg.epochs);
        set!(patience => cfg.patience);
        set!(lr => cfg.lr);
        set!(rank => cfg.lora.rank);
        set!(seeds => cfg.seeds);
        set!(pretrain_mode => cfg.pretrain.mode);
        let f = &mut cfg.ablation;
        f.use_mmd |= self.use_mmd;
        f.disable_smmd |= self.disable_smmd;
        f.disable_cl |= self.disable_cl;
        f.disable_str |= self.disable_str;
        f.disable_lowrank |= self.disable_lowrank;
        f.disable_projector |= self.disable_projector;
        f.disable_lora_branch |= self.disable_lora_branch;
        Ok(cfg)
    }
}

fn emit<T: Serialize>(report: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

/// Verification and numeric failures exit with 1, everything else
/// (usage, configuration, format, I/O) with 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Verification(_) | Error::Training(_) | Error::Numeric(_) | Error::Condition(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    let common = match &cli.command {
        Command::Pretrain(c) | Command::Finetune(c) | Command::Ablate(c) | Command::Gradcheck(c) => c,
        Command::Eval { common, .. }
        | Command::Theory { common, .. }
        | Command::ExportEmbeddings { common, .. }
        | Command::GenSynth { common, .. } => common,
    };
    let mut cfg = common.resolve()?;
    match &cli.command {
        Command::Eval { split: Some(s), .. } => cfg.eval_split = *s,
        Command::Theory {
            corrupt_bound: Some(b),
            ..
        } => cfg.theory.corrupt_bound = Some(*b),
        Command::GenSynth { seed: Some(s), .. } => cfg.synth.seed = *s,
        _ => {}
    }
    eprintln!("effective config: {}", serde_json::to_string(&cfg)?);

    match &cli.command {
        Command::Pretrain(_) => emit(&pipeline::cmd_pretrain(&cfg)?)?,
        Command::Finetune(_) => {
            let r = pipeline::cmd_finetune(&cfg)?;
            emit(&r)?;
            return Ok(r.freeze_audit_pass);
        }
        Command::Eval { .. } => emit(&pipeline::cmd_eval(&cfg)?)?,
        Command::Ablate(_) => {
            let r = pipeline::cmd_ablate(&cfg)?;
            eprint!("{}", r.table());
            emit(&r)?;
            return Ok(r.all_isolated);
        }
        Command::Theory { .. } => {
            let r = pipeline::cmd_theory(&cfg)?;
            emit(&r)?;
            return Ok(r.all_pass);
        }
        Command::Gradcheck(_) => {
            let r = pipeline::cmd_gradcheck(&cfg)?;
            emit(&r)?;
            return Ok(r.all_pass);
        }
        Command::ExportEmbeddings { out, .. } => emit(&pipeline::cmd_export_embeddings(&cfg, out)?)?,
        Command::GenSynth { out, .. } => emit(&pipeline::cmd_gen_synth(&cfg, out)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
