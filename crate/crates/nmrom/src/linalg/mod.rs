//! Dense decompositions, spectral-decay diagnostics, iterative sparse
//! solvers, and the damped least-squares driver used for the latent updates.

mod lm;
mod pod;
mod solvers;

pub use lm::{levenberg_marquardt, JacobianMode, LmConfig, LmDiagnostics, LmOutcome};
pub use pod::{pod, projection_errors, pseudo_inverse, residual_energy, PodBasis};
pub use solvers::solve_sparse;
