//! Configuration, the fine-tuning loop, evaluation, ablations and the
//! command implementations behind the `graphlora` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;

pub use checkpoint::{frozen_digest, Checkpoint, CheckpointKind, Manifest};
pub use commands::{
    ablate, cmd_ablate, cmd_eval, cmd_export_embeddings, cmd_finetune, cmd_gen_synth,
    cmd_gradcheck, cmd_pretrain, cmd_theory, load_export, load_pretrained, run_arm, splits_for,
    AblationReport, EvalReport, FinetuneReport, PretrainReport,
};
pub use config::{AblationFlags, EvalSplit, GradcheckConfig, RunConfig, Variant, OUTPUT_DIR_ENV};
pub use finetune::{finetune, predict, Arm, FinetuneOptions, FinetuneOutcome, FreezeAudit, TargetData};
pub use gradcheck::{run_gradcheck, GradcheckReport, Term};
pub use metrics::{accuracy, class_separation, mean_std, Confusion, LossRecord, MetricsReport};
