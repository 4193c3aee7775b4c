//! Latent time stepping by residual minimization, greedy collocation-point
//! selection, and the over-collocation / gappy-least-squares hyper-reduced
//! variants with or without a compressed decoder.

mod greedy;
mod step;

pub use greedy::select_magic_points;
pub use step::{
    build_gnat, hyper_reduced_step, nm_lspg_step, rollout, GnatProjector, LatentTrajectory,
    RomDecoder, RomVariant, VariantKind,
};
