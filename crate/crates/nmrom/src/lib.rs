//! Reduced-order modeling of parametric 2D conservation laws on a nonlinear
//! solution manifold.
//!
//! The library learns the manifold with a convolutional autoencoder, evolves
//! the latent coordinates by minimizing the full-order finite-volume residual
//! (least-squares Petrov-Galerkin in latent space), and removes the dependence
//! on the full mesh size with over-collocation hyper-reduction plus an
//! optional teacher-student compressed decoder. An LSTM baseline evolves the
//! same latent space purely from data.

pub mod autoencoder;
pub mod cli;
pub mod error;
pub mod fvm;
pub mod grid;
pub mod latent;
pub mod linalg;
pub mod neural;
pub mod rom;
pub mod snapshots;

pub use error::{Error, Result};
