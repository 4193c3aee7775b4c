//! 2D nonlinear conservation law: two velocity components advected by half
//! their own previous-step field, with viscous diffusion and zero-Dirichlet
//! walls.
//!
//! Semi-implicit step: `M/dt U + C(U_prev) U - nu D U = M/dt U_prev`, with
//! bounded first-order upwind advection and central surface-normal gradients.
//! Ghost values at the walls take the boundary value 0.

use super::{cell_faces, check_projector, DiscreteProblem, LinearSolverConfig, ProblemId};
use super::{SparseBuilder, SparseOperator};
use crate::grid::{Field, Grid, SubmeshProjector};
use crate::linalg::solve_sparse;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct NclProblem {
    /// Viscosity.
    pub nu: f64,
    /// Initial-condition scale.
    pub mu: f64,
    pub grid: Grid,
    pub dt: f64,
    pub t_final: f64,
    pub solver: LinearSolverConfig,
}

impl NclProblem {
    pub fn new(grid: Grid, mu: f64, nu: f64, dt: f64, t_final: f64) -> Result<Self> {
        if nu < 0.0 {
            return Err(Error::Argument("viscosity must be nonnegative".into()));
        }
        if dt <= 0.0 {
            return Err(Error::Argument("time step must be positive".into()));
        }
        if mu <= 0.0 {
            return Err(Error::Argument("initial-condition scale must be positive".into()));
        }
        let solver = LinearSolverConfig::for_dimension(2 * grid.n_cells());
        Ok(Self {
            nu,
            mu,
            grid,
            dt,
            t_final,
            solver,
        })
    }

    /// Benchmark configuration on the given grid (viscosity 1e-4, unit
    /// square, step 1e-3).
    pub fn benchmark(grid: Grid, mu: f64, t_final: f64) -> Result<Self> {
        Self::new(grid, mu, 1e-4, 1e-3, t_final)
    }

    /// Residual entry for one cell and channel, evaluated through value
    /// lookups so full and halo-restricted paths share the arithmetic.
    fn residual_entry(
        &self,
        cell: usize,
        ch: usize,
        state: &dyn Fn(usize, usize) -> f64,
        prev: &dyn Fn(usize, usize) -> f64,
    ) -> f64 {
        let grid = &self.grid;
        let vol = grid.cell_volume();
        let mut r = vol / self.dt * (state(ch, cell) - prev(ch, cell));
        for face in cell_faces(grid, cell) {
            // advecting velocity is half the previous state, interpolated to
            // the face; wall ghost value is the boundary value 0
            let v_own = 0.5 * prev(face.axis, cell);
            let v_face = match face.neighbor {
                Some(n) => 0.5 * (v_own + 0.5 * prev(face.axis, n)),
                None => 0.5 * v_own,
            };
            let flux = v_face * face.sign * face.area;
            let upwind = if flux >= 0.0 {
                state(ch, cell)
            } else {
                match face.neighbor {
                    Some(n) => state(ch, n),
                    None => 0.0,
                }
            };
            r += flux * upwind;
            // diffusive flux, central difference; Dirichlet wall at half a
            // cell distance
            let grad_out = match face.neighbor {
                Some(n) => (state(ch, n) - state(ch, cell)) / face.dist,
                None => (0.0 - state(ch, cell)) / (0.5 * face.dist),
            };
            r -= self.nu * grad_out * face.area;
        }
        r
    }
}

/// Initial velocity: both components `0.8 * mu * sin(2 pi x) sin(2 pi y)`
/// inside `[0, 0.5]^2`, zero elsewhere, sampled at cell centers.
pub fn initial_condition_ncl(grid: &Grid, mu: f64) -> Field {
    let n = grid.n_cells();
    let mut f = Field::zeros(2, n);
    for cell in 0..n {
        let (x, y) = grid.cell_center(cell);
        let v = if x <= 0.5 && y <= 0.5 {
            0.8 * mu
                * (2.0 * std::f64::consts::PI * x).sin()
                * (2.0 * std::f64::consts::PI * y).sin()
        } else {
            0.0
        };
        f.set(0, cell, v);
        f.set(1, cell, v);
    }
    f
}

/// Assembles the implicit operator `M/dt + C(U_prev) - nu D` and the right
/// hand side `M/dt U_prev` over both velocity channels (block diagonal).
pub fn assemble_ncl(u_prev: &Field, problem: &NclProblem) -> Result<(SparseOperator, Vec<f64>)> {
    let grid = &problem.grid;
    let n = grid.n_cells();
    if u_prev.channels() != 2 || u_prev.n_cells() != n {
        return Err(Error::Shape(format!(
            "previous state must be 2 x {n}, got {} x {}",
            u_prev.channels(),
            u_prev.n_cells()
        )));
    }
    if !u_prev.is_finite() {
        return Err(Error::Numeric("previous state contains NaN/inf".into()));
    }
    let vol = grid.cell_volume();
    let mut builder = SparseBuilder::new(2 * n);
    let mut rhs = vec![0.0; 2 * n];
    for ch in 0..2 {
        for cell in 0..n {
            let row_off = ch * n;
            builder.add(row_off + cell, vol / problem.dt);
            rhs[row_off + cell] = vol / problem.dt * u_prev.get(ch, cell);
            for face in cell_faces(grid, cell) {
                let v_own = 0.5 * u_prev.get(face.axis, cell);
                let v_face = match face.neighbor {
                    Some(nb) => 0.5 * (v_own + 0.5 * u_prev.get(face.axis, nb)),
                    None => 0.5 * v_own,
                };
                let flux = v_face * face.sign * face.area;
                if flux >= 0.0 {
                    builder.add(row_off + cell, flux);
                } else if let Some(nb) = face.neighbor {
                    builder.add(row_off + nb, flux);
                }
                // -nu D entries
                match face.neighbor {
                    Some(nb) => {
                        let w = problem.nu * face.area / face.dist;
                        builder.add(row_off + cell, w);
                        builder.add(row_off + nb, -w);
                    }
                    None => {
                        let w = problem.nu * face.area / (0.5 * face.dist);
                        builder.add(row_off + cell, w);
                    }
                }
            }
            builder.finish_row();
        }
    }
    Ok((builder.build()?, rhs))
}

impl DiscreteProblem for NclProblem {
    fn id(&self) -> ProblemId {
        ProblemId::Ncl
    }

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn t_final(&self) -> f64 {
        self.t_final
    }

    fn solver_config(&self) -> LinearSolverConfig {
        self.solver
    }

    fn initial_condition(&self) -> Field {
        initial_condition_ncl(&self.grid, self.mu)
    }

    fn residual(&self, state: &Field, state_prev: &Field) -> Result<Vec<f64>> {
        let n = self.grid.n_cells();
        if state.channels() != 2 || state.n_cells() != n || state_prev.channels() != 2 {
            return Err(Error::Shape("state fields must be 2-channel on the grid".into()));
        }
        let get = |ch: usize, c: usize| state.get(ch, c);
        let get_prev = |ch: usize, c: usize| state_prev.get(ch, c);
        let mut r = Vec::with_capacity(2 * n);
        for ch in 0..2 {
            for cell in 0..n {
                r.push(self.residual_entry(cell, ch, &get, &get_prev));
            }
        }
        Ok(r)
    }

    fn residual_restricted(
        &self,
        state_halo: &[f64],
        prev_halo: &[f64],
        proj: &SubmeshProjector,
    ) -> Result<Vec<f64>> {
        check_projector(self, proj)?;
        let s_h = proj.n_halo();
        if state_halo.len() != 2 * s_h || prev_halo.len() != 2 * s_h {
            return Err(Error::Shape(format!(
                "halo states must have length {}, got {} and {}",
                2 * s_h,
                state_halo.len(),
                prev_halo.len()
            )));
        }
        let slot = |c: usize| proj.halo_slot(c).expect("halo covers stencil");
        let get = |ch: usize, c: usize| state_halo[ch * s_h + slot(c)];
        let get_prev = |ch: usize, c: usize| prev_halo[ch * s_h + slot(c)];
        let mut r = Vec::with_capacity(2 * proj.n_magic());
        for ch in 0..2 {
            for &cell in proj.magic_points() {
                r.push(self.residual_entry(cell, ch, &get, &get_prev));
            }
        }
        Ok(r)
    }

    fn step(&self, state_prev: &Field) -> Result<Field> {
        let (a, b) = assemble_ncl(state_prev, self)?;
        let x = solve_sparse(&a, &b, &self.solver)?;
        Field::from_values(2, self.grid.n_cells(), x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_submesh, restrict, RestrictTarget};

    fn problem(nx: usize) -> NclProblem {
        NclProblem::benchmark(Grid::unit(nx, nx).unwrap(), 1.0, 0.1).unwrap()
    }

    #[test]
    fn initial_condition_peak_and_support() {
        // 6x6 grid has a cell center exactly at (0.25, 0.25)
        let g = Grid::unit(6, 6).unwrap();
        let f = initial_condition_ncl(&g, 1.0);
        let peak = g.cell_index(1, 1); // center (0.25, 0.25)
        assert!((f.get(0, peak) - 0.8).abs() < 1e-12);
        assert!((f.get(1, peak) - 0.8).abs() < 1e-12);
        let outside = g.cell_index(4, 4); // center (0.75, 0.75)
        assert_eq!(f.get(0, outside), 0.0);
    }

    #[test]
    fn initial_condition_is_linear_in_mu() {
        let g = Grid::unit(8, 8).unwrap();
        let f1 = initial_condition_ncl(&g, 1.0);
        let f2 = initial_condition_ncl(&g, 2.0);
        for i in 0..f1.len() {
            assert!((f2.values()[i] - 2.0 * f1.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let p = problem(6);
        let zero = Field::zeros(2, p.grid.n_cells());
        let next = p.step(&zero).unwrap();
        for &v in next.values() {
            assert!(v.abs() < 1e-12);
        }
        let (_, b) = assemble_ncl(&zero, &p).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mass_diagonal_is_volume_over_dt() {
        let p = problem(4);
        let mut inviscid = p.clone();
        inviscid.nu = 0.0;
        let zero = Field::zeros(2, p.grid.n_cells());
        let (a, _) = assemble_ncl(&zero, &inviscid).unwrap();
        let expect = p.grid.cell_volume() / p.dt;
        for d in a.diagonal() {
            assert!((d - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn advection_rows_sum_to_zero_for_interior_cells() {
        // nu = 0, constant previous state: advection of a constant vanishes
        let g = Grid::unit(4, 4).unwrap();
        let mut p = problem(4);
        p.nu = 0.0;
        let mut prev = Field::zeros(2, g.n_cells());
        prev.values_mut().fill(0.7);
        let (a, _) = assemble_ncl(&prev, &p).unwrap();
        let vol_dt = g.cell_volume() / p.dt;
        for ch in 0..2 {
            for iy in 1..3 {
                for ix in 1..3 {
                    let row = ch * g.n_cells() + g.cell_index(ix, iy);
                    let sum = a.row_sum(row) - vol_dt;
                    assert!(sum.abs() < 1e-12, "row {row} advection sum {sum}");
                }
            }
        }
    }

    #[test]
    fn advection_has_m_matrix_sign_pattern() {
        let g = Grid::unit(5, 5).unwrap();
        let mut p = problem(5);
        p.nu = 0.0;
        let prev = initial_condition_ncl(&g, 2.0);
        let (a, _) = assemble_ncl(&prev, &p).unwrap();
        let vol_dt = g.cell_volume() / p.dt;
        for i in 0..a.dim() {
            for (c, v) in a.row(i) {
                if c == i {
                    assert!(v - vol_dt >= -1e-12, "diagonal advection negative: {v}");
                } else {
                    assert!(v <= 1e-12, "positive off-diagonal {v}");
                }
            }
        }
    }

    #[test]
    fn solved_step_has_small_residual() {
        let p = problem(8);
        let prev = initial_condition_ncl(&p.grid, 1.3);
        let next = p.step(&prev).unwrap();
        let r = p.residual(&next, &prev).unwrap();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-9, "residual norm {norm}");
        // dynamics is nonzero
        let r_prev = p.residual(&prev, &prev).unwrap();
        let norm_prev = r_prev.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm_prev > 1e-6);
    }

    #[test]
    fn residual_is_affine_in_state() {
        let p = problem(6);
        let n = p.grid.n_cells();
        let mk = |seed: u64| {
            let vals: Vec<f64> = (0..2 * n)
                .map(|i| (((i as u64 + seed) as f64 * 0.7311).sin()) * 0.4)
                .collect();
            Field::from_values(2, n, vals).unwrap()
        };
        let prev = mk(3);
        let s1 = mk(11);
        let s2 = mk(29);
        let a = 0.3;
        let blend_vals: Vec<f64> = s1
            .values()
            .iter()
            .zip(s2.values())
            .map(|(x, y)| a * x + (1.0 - a) * y)
            .collect();
        let blend = Field::from_values(2, n, blend_vals).unwrap();
        let r1 = p.residual(&s1, &prev).unwrap();
        let r2 = p.residual(&s2, &prev).unwrap();
        let rb = p.residual(&blend, &prev).unwrap();
        for i in 0..2 * n {
            let expect = a * r1[i] + (1.0 - a) * r2[i];
            assert!((rb[i] - expect).abs() < 1e-10, "row {i}");
        }
    }

    #[test]
    fn restricted_residual_equals_gathered_full_residual() {
        let p = problem(6);
        let n = p.grid.n_cells();
        let proj = build_submesh(&p.grid, &[7, 20, 33], 1).unwrap();
        let mk = |seed: u64| {
            let vals: Vec<f64> = (0..2 * n)
                .map(|i| (((i as u64).wrapping_mul(seed) as f64 * 0.000137).sin()) * 0.8)
                .collect();
            Field::from_values(2, n, vals).unwrap()
        };
        let state = mk(7919);
        let prev = mk(104729);
        let full = p.residual(&state, &prev).unwrap();
        let state_h = restrict(&state, &proj, RestrictTarget::Halo).unwrap();
        let prev_h = restrict(&prev, &proj, RestrictTarget::Halo).unwrap();
        let restricted = p.residual_restricted(&state_h, &prev_h, &proj).unwrap();
        let mut gathered = Vec::new();
        for ch in 0..2 {
            for &c in proj.magic_points() {
                gathered.push(full[ch * n + c]);
            }
        }
        assert_eq!(restricted, gathered, "restricted residual must be bitwise equal");
    }

    #[test]
    fn all_cells_restriction_matches_full_residual() {
        let p = problem(5);
        let n = p.grid.n_cells();
        let all: Vec<usize> = (0..n).collect();
        let proj = build_submesh(&p.grid, &all, 1).unwrap();
        let state = initial_condition_ncl(&p.grid, 1.7);
        let prev = initial_condition_ncl(&p.grid, 1.5);
        let full = p.residual(&state, &prev).unwrap();
        let state_h = restrict(&state, &proj, RestrictTarget::Halo).unwrap();
        let prev_h = restrict(&prev, &proj, RestrictTarget::Halo).unwrap();
        let restricted = p.residual_restricted(&state_h, &prev_h, &proj).unwrap();
        assert_eq!(restricted, full);
    }

    #[test]
    fn assemble_rejects_nan_state() {
        let p = problem(4);
        let mut prev = Field::zeros(2, p.grid.n_cells());
        prev.set(0, 3, f64::NAN);
        assert!(assemble_ncl(&prev, &p).is_err());
    }

    #[test]
    fn strong_diffusion_decays_monotonically() {
        let g = Grid::unit(8, 8).unwrap();
        let p = NclProblem::new(g, 1.0, 1.0, 1e-3, 0.01).unwrap();
        let mut state = initial_condition_ncl(&g, 1.0);
        let mut prev_max = state.values().iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        for _ in 0..10 {
            state = p.step(&state).unwrap();
            let max = state.values().iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            assert!(max <= prev_max + 1e-12, "max grew: {max} > {prev_max}");
            prev_max = max;
        }
        assert!(prev_max < 0.8);
    }
}
