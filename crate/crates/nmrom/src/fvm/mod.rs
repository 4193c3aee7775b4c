//! Finite-volume discretizations of the two benchmark problems, their
//! residual evaluators (full and submesh-restricted), and semi-implicit time
//! stepping.
//!
//! Full and restricted residuals share the same per-cell evaluation code, so
//! restricting the full residual to the magic points and evaluating the
//! restricted residual from matching halo values are bitwise identical.

mod ncl;
mod rollout;
mod sparse;
mod swe;

pub use ncl::{assemble_ncl, initial_condition_ncl, NclProblem};
pub use rollout::{fom_rollout, SnapshotSeries};
pub use sparse::{SparseBuilder, SparseOperator};
pub use swe::{assemble_swe, initial_condition_swe, SweProblem, SweSystems};

use crate::grid::{Field, Grid, SubmeshProjector};
use crate::Result;

/// Iterative method used for the implicit solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterativeMethod {
    BiCgStab,
    ConjugateGradient,
    GaussSeidel,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearSolverConfig {
    pub method: IterativeMethod,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl LinearSolverConfig {
    /// Default configuration for a system of dimension `d`.
    pub fn for_dimension(d: usize) -> Self {
        Self {
            method: IterativeMethod::BiCgStab,
            abs_tol: 1e-12,
            rel_tol: 1e-14,
            max_iters: 10 * d.max(10),
        }
    }
}

/// Which benchmark a snapshot set or model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProblemId {
    Ncl,
    Swe,
}

impl ProblemId {
    pub fn channels(&self) -> usize {
        match self {
            ProblemId::Ncl => 2,
            ProblemId::Swe => 3,
        }
    }

    pub fn stencil_layers(&self) -> usize {
        match self {
            ProblemId::Ncl => 1,
            ProblemId::Swe => 2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemId::Ncl => "ncl",
            ProblemId::Swe => "swe",
        }
    }
}

impl std::str::FromStr for ProblemId {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncl" => Ok(ProblemId::Ncl),
            "swe" => Ok(ProblemId::Swe),
            other => Err(crate::Error::Argument(format!("unknown problem '{other}'"))),
        }
    }
}

/// A time-discrete problem whose residual the latent dynamics minimizes.
///
/// One time step solves `G(state, state_prev) = 0` where `G` is affine in
/// `state` for a frozen `state_prev`.
pub trait DiscreteProblem: Sync {
    fn id(&self) -> ProblemId;
    fn grid(&self) -> &Grid;
    fn mu(&self) -> f64;
    fn dt(&self) -> f64;
    fn t_final(&self) -> f64;
    fn channels(&self) -> usize {
        self.id().channels()
    }
    /// Stencil depth a submesh halo must cover.
    fn stencil_layers(&self) -> usize {
        self.id().stencil_layers()
    }
    fn solver_config(&self) -> LinearSolverConfig;
    fn initial_condition(&self) -> Field;
    /// Full residual, channel-major over cells.
    fn residual(&self, state: &Field, state_prev: &Field) -> Result<Vec<f64>>;
    /// Residual rows at the magic points only, assembled from halo values.
    fn residual_restricted(
        &self,
        state_halo: &[f64],
        prev_halo: &[f64],
        proj: &SubmeshProjector,
    ) -> Result<Vec<f64>>;
    /// One semi-implicit step.
    fn step(&self, state_prev: &Field) -> Result<Field>;
}

/// Face of a cell in the fixed traversal order x-, x+, y-, y+.
#[derive(Clone, Copy)]
pub(crate) struct FaceGeometry {
    /// Neighbor cell, `None` at the boundary.
    pub neighbor: Option<usize>,
    /// Outward normal axis: 0 = x, 1 = y.
    pub axis: usize,
    /// Outward normal sign along that axis.
    pub sign: f64,
    /// Face area.
    pub area: f64,
    /// Center-to-center distance across the face.
    pub dist: f64,
}

pub(crate) fn cell_faces(grid: &Grid, cell: usize) -> [FaceGeometry; 4] {
    let (ix, iy) = grid.cell_coords(cell);
    let (nx, ny) = (grid.nx(), grid.ny());
    let (hx, hy) = (grid.hx(), grid.hy());
    [
        FaceGeometry {
            neighbor: (ix > 0).then(|| grid.cell_index(ix - 1, iy)),
            axis: 0,
            sign: -1.0,
            area: hy,
            dist: hx,
        },
        FaceGeometry {
            neighbor: (ix + 1 < nx).then(|| grid.cell_index(ix + 1, iy)),
            axis: 0,
            sign: 1.0,
            area: hy,
            dist: hx,
        },
        FaceGeometry {
            neighbor: (iy > 0).then(|| grid.cell_index(ix, iy - 1)),
            axis: 1,
            sign: -1.0,
            area: hx,
            dist: hy,
        },
        FaceGeometry {
            neighbor: (iy + 1 < ny).then(|| grid.cell_index(ix, iy + 1)),
            axis: 1,
            sign: 1.0,
            area: hx,
            dist: hy,
        },
    ]
}

/// Validates that a projector can host the restricted residual of `problem`.
pub(crate) fn check_projector(problem: &dyn DiscreteProblem, proj: &SubmeshProjector) -> Result<()> {
    if proj.layers() < problem.stencil_layers() {
        return Err(crate::Error::Config(format!(
            "{} needs a stencil of {} layer(s), projector was built with {}",
            problem.id().as_str(),
            problem.stencil_layers(),
            proj.layers()
        )));
    }
    if proj.n_cells() != problem.grid().n_cells() {
        return Err(crate::Error::Shape(
            "projector was built for a different grid".into(),
        ));
    }
    Ok(())
}
