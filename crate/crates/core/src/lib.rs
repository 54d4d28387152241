//! Low-rank adaptation of frozen message-passing GNNs for cross-graph
//! transfer.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: matrices, SVD, reverse-mode gradients, Adam, RNG
//! - [`graphio`]: graphs, dataset I/O, synthetic generators, splits, PPR
//! - [`mpnn`]: propagate/transform backbone and pretraining
//! - [`lora`]: frozen backbone plus parallel low-rank branch, projector, head
//! - [`objectives`]: kernels, (structure-aware) MMD, contrastive and
//!   homophily losses, the combined objective and batch sampling
//! - [`theory`]: numerical checks of the low-rank expressivity results
//! - [`pipeline`]: configuration, fine-tuning loop, evaluation, ablations
//!   and the command implementations behind the `graphlora` binary

pub mod error;
pub mod graphio;
pub mod lora;
pub mod mpnn;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod theory;

pub use error::{Error, Result};
pub use numerics::Matrix;
