//! Dense linear algebra, reverse-mode gradients, Adam and seeded randomness.

pub mod adam;
pub mod autodiff;
pub mod linalg;
pub mod matrix;
pub mod params;
pub mod rng;

pub use adam::{AdamConfig, AdamState};
pub use autodiff::{Tape, Var};
pub use linalg::{inverse, spectral_norm, svd, Svd};
pub use matrix::Matrix;
pub use params::{
    compare_with_finite_differences, finite_diff_check, grad_of, FdReport, GradScope, Gradients,
    Param, ParamSet, ParamVars, FD_STEP,
};
pub use rng::Rng;
