//! Loss terms of the fine-tuning objective.

pub mod combined;
pub mod contrastive;
pub mod kernel;
pub mod structure;

pub use combined::{
    classification_loss, classification_tape, param_sq_norm_tape, sample_batch, total_loss,
    LossParts, LossWeights, PROB_FLOOR,
};
pub use contrastive::{contrastive_loss, contrastive_tape, ContrastiveConfig, PositiveSets, Reduction};
pub use kernel::{
    kernel_matrix, median_bandwidth, mmd, rbf_kernel, smmd, smmd_gamma, smmd_tape, Bandwidth,
    KernelConfig, S_MIN,
};
pub use structure::{sample_pairs, structure_reg, structure_tape, PairSample};
