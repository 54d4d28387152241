//! Graphs, dataset I/O, synthetic generators, splits and diffusion.

pub mod diffusion;
pub mod graph;
pub mod io;
pub mod splits;
pub mod synth;

pub use diffusion::{ppr_diffusion, sym_norm_adj, DiffusionConfig, DiffusionMode};
pub use graph::{Graph, Splits};
pub use io::{load_graph, save_graph};
pub use splits::{make_splits, SplitProtocol};
pub use synth::{gen_synth, SynthSpec};
