//! Numerical checks of the expressivity results for low-rank adapted GNNs.
//!
//! Everything here uses the feature-major layer
//! `H^l = ReLU(W^l H^{l-1} P + b^l 1^T)` with square `D x D` weights, and the
//! merged adapted model `g = GNN(W + ΔW, b̂)`, which differs from the
//! two-branch training model in [`crate::lora`].

pub mod bound;
pub mod instance;
pub mod synth;
pub mod verify;

pub use bound::{expected_input_norm, theorem2_bound, BoundParts};
pub use instance::{
    best_rank_r, gnn_forward, make_partition, random_propagation, sample_inputs, singular_value,
    InstanceSpec, PropagationKind, TheoryInstance,
};
pub use synth::{
    adapted_forward, measure, synthesize_constructive, synthesize_exact, synthesize_optimized,
    Adapters, Measurement, OptimizeConfig,
};
pub use verify::{
    verify_theorems, within_bound, InstanceReport, SkippedInstance, SuiteSpec, TheoryConfig,
    TheoryReport,
};
