//! 2D shallow water equations with slip walls and zero-gradient depth.
//!
//! State channels are (U1, U2, h). One semi-implicit step solves the
//! momentum system for the new velocity (mass `vol/dt * h_prev` per cell,
//! upwind advection by the previous mass flux, explicit gravity from the
//! previous depth), then the continuity system for the new depth (upwind
//! advection by the previous velocity). Both systems are assembled from the
//! previous state only, so the combined residual is affine in the new state.

use super::{cell_faces, check_projector, DiscreteProblem, LinearSolverConfig, ProblemId};
use super::{SparseBuilder, SparseOperator};
use crate::grid::{Field, Grid, SubmeshProjector};
use crate::linalg::solve_sparse;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SweProblem {
    /// Gravitational acceleration magnitude.
    pub gravity: f64,
    /// Initial-depth scale.
    pub mu: f64,
    pub grid: Grid,
    pub dt: f64,
    pub t_final: f64,
    pub solver: LinearSolverConfig,
}

/// The two linear systems of one step: momentum (both velocity channels,
/// block diagonal) and continuity.
#[derive(Debug)]
pub struct SweSystems {
    pub momentum: SparseOperator,
    pub momentum_rhs: Vec<f64>,
    pub continuity: SparseOperator,
    pub continuity_rhs: Vec<f64>,
}

impl SweProblem {
    pub fn new(grid: Grid, mu: f64, gravity: f64, dt: f64, t_final: f64) -> Result<Self> {
        if gravity <= 0.0 {
            return Err(Error::Argument("gravity must be positive".into()));
        }
        if dt <= 0.0 {
            return Err(Error::Argument("time step must be positive".into()));
        }
        if mu <= 0.0 {
            return Err(Error::Argument("depth scale must be positive".into()));
        }
        let solver = LinearSolverConfig::for_dimension(2 * grid.n_cells());
        Ok(Self {
            gravity,
            mu,
            grid,
            dt,
            t_final,
            solver,
        })
    }

    /// Benchmark configuration: unit square, g = 9.81, step 1e-4.
    pub fn benchmark(grid: Grid, mu: f64, t_final: f64) -> Result<Self> {
        Self::new(grid, mu, 9.81, 1e-4, t_final)
    }

    /// Central-difference depth gradient component with zero-gradient ghosts.
    fn depth_gradient(
        &self,
        cell: usize,
        axis: usize,
        prev: &dyn Fn(usize, usize) -> f64,
    ) -> f64 {
        let grid = &self.grid;
        let (ix, iy) = grid.cell_coords(cell);
        let h_here = prev(2, cell);
        let (lo, hi, spacing) = if axis == 0 {
            let lo = (ix > 0).then(|| grid.cell_index(ix - 1, iy));
            let hi = (ix + 1 < grid.nx()).then(|| grid.cell_index(ix + 1, iy));
            (lo, hi, grid.hx())
        } else {
            let lo = (iy > 0).then(|| grid.cell_index(ix, iy - 1));
            let hi = (iy + 1 < grid.ny()).then(|| grid.cell_index(ix, iy + 1));
            (lo, hi, grid.hy())
        };
        let h_lo = lo.map(|c| prev(2, c)).unwrap_or(h_here);
        let h_hi = hi.map(|c| prev(2, c)).unwrap_or(h_here);
        (h_hi - h_lo) / (2.0 * spacing)
    }

    fn residual_entry(
        &self,
        cell: usize,
        ch: usize,
        state: &dyn Fn(usize, usize) -> f64,
        prev: &dyn Fn(usize, usize) -> f64,
    ) -> f64 {
        let grid = &self.grid;
        let vol = grid.cell_volume();
        if ch < 2 {
            // momentum component ch
            let h_prev = prev(2, cell);
            let mut r = vol / self.dt * h_prev * (state(ch, cell) - prev(ch, cell));
            for face in cell_faces(grid, cell) {
                // mass flux from the previous step; slip walls carry none
                let Some(nb) = face.neighbor else { continue };
                let mf_own = prev(2, cell) * prev(face.axis, cell);
                let mf_nb = prev(2, nb) * prev(face.axis, nb);
                let flux = 0.5 * (mf_own + mf_nb) * face.sign * face.area;
                let upwind = if flux >= 0.0 { state(ch, cell) } else { state(ch, nb) };
                r += flux * upwind;
            }
            r += self.gravity * h_prev * self.depth_gradient(cell, ch, prev) * vol;
            r
        } else {
            // continuity
            let mut r = vol / self.dt * (state(2, cell) - prev(2, cell));
            for face in cell_faces(grid, cell) {
                let Some(nb) = face.neighbor else { continue };
                let v_face = 0.5 * (prev(face.axis, cell) + prev(face.axis, nb));
                let flux = v_face * face.sign * face.area;
                let upwind = if flux >= 0.0 { state(2, cell) } else { state(2, nb) };
                r += flux * upwind;
            }
            r
        }
    }
}

/// Initial state: velocities zero; depth is the scale `mu` carrying a smooth
/// bump of height `mu` centered at (0.5, 0.5) with support radius 0.2.
pub fn initial_condition_swe(grid: &Grid, mu: f64) -> Field {
    let n = grid.n_cells();
    let mut f = Field::zeros(3, n);
    for cell in 0..n {
        let (x, y) = grid.cell_center(cell);
        let r2 = (x - 0.5).powi(2) + (y - 0.5).powi(2);
        let h = if r2 < 0.04 {
            mu * (1.0 + std::f64::consts::E * (-0.04 / (0.04 - r2)).exp())
        } else {
            mu
        };
        f.set(2, cell, h);
    }
    f
}

/// Assembles both linear systems of one step from the previous state.
pub fn assemble_swe(state_prev: &Field, problem: &SweProblem) -> Result<SweSystems> {
    let grid = &problem.grid;
    let n = grid.n_cells();
    if state_prev.channels() != 3 || state_prev.n_cells() != n {
        return Err(Error::Shape(format!(
            "previous state must be 3 x {n}, got {} x {}",
            state_prev.channels(),
            state_prev.n_cells()
        )));
    }
    if !state_prev.is_finite() {
        return Err(Error::Numeric("previous state contains NaN/inf".into()));
    }
    let h_min = state_prev.channel(2).iter().cloned().fold(f64::INFINITY, f64::min);
    if h_min <= 0.0 {
        return Err(Error::Domain(format!(
            "nonpositive water depth {h_min} (blow-up)"
        )));
    }
    let vol = grid.cell_volume();
    let prev = |ch: usize, c: usize| state_prev.get(ch, c);

    let mut mom = SparseBuilder::new(2 * n);
    let mut mom_rhs = vec![0.0; 2 * n];
    for ch in 0..2 {
        for cell in 0..n {
            let row_off = ch * n;
            let h_prev = prev(2, cell);
            mom.add(row_off + cell, vol / problem.dt * h_prev);
            for face in cell_faces(grid, cell) {
                let Some(nb) = face.neighbor else { continue };
                let mf_own = prev(2, cell) * prev(face.axis, cell);
                let mf_nb = prev(2, nb) * prev(face.axis, nb);
                let flux = 0.5 * (mf_own + mf_nb) * face.sign * face.area;
                if flux >= 0.0 {
                    mom.add(row_off + cell, flux);
                } else {
                    mom.add(row_off + nb, flux);
                }
            }
            mom_rhs[row_off + cell] = vol / problem.dt * h_prev * prev(ch, cell)
                - problem.gravity * h_prev * problem.depth_gradient(cell, ch, &prev) * vol;
            mom.finish_row();
        }
    }

    let mut cont = SparseBuilder::new(n);
    let mut cont_rhs = vec![0.0; n];
    for cell in 0..n {
        cont.add(cell, vol / problem.dt);
        for face in cell_faces(grid, cell) {
            let Some(nb) = face.neighbor else { continue };
            let v_face = 0.5 * (prev(face.axis, cell) + prev(face.axis, nb));
            let flux = v_face * face.sign * face.area;
            if flux >= 0.0 {
                cont.add(cell, flux);
            } else {
                cont.add(nb, flux);
            }
        }
        cont_rhs[cell] = vol / problem.dt * prev(2, cell);
        cont.finish_row();
    }

    Ok(SweSystems {
        momentum: mom.build()?,
        momentum_rhs: mom_rhs,
        continuity: cont.build()?,
        continuity_rhs: cont_rhs,
    })
}

impl DiscreteProblem for SweProblem {
    fn id(&self) -> ProblemId {
        ProblemId::Swe
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
        initial_condition_swe(&self.grid, self.mu)
    }

    fn residual(&self, state: &Field, state_prev: &Field) -> Result<Vec<f64>> {
        let n = self.grid.n_cells();
        if state.channels() != 3 || state.n_cells() != n || state_prev.channels() != 3 {
            return Err(Error::Shape("state fields must be 3-channel on the grid".into()));
        }
        let get = |ch: usize, c: usize| state.get(ch, c);
        let get_prev = |ch: usize, c: usize| state_prev.get(ch, c);
        let mut r = Vec::with_capacity(3 * n);
        for ch in 0..3 {
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
        if state_halo.len() != 3 * s_h || prev_halo.len() != 3 * s_h {
            return Err(Error::Shape(format!(
                "halo states must have length {}, got {} and {}",
                3 * s_h,
                state_halo.len(),
                prev_halo.len()
            )));
        }
        let slot = |c: usize| proj.halo_slot(c).expect("halo covers stencil");
        let get = |ch: usize, c: usize| state_halo[ch * s_h + slot(c)];
        let get_prev = |ch: usize, c: usize| prev_halo[ch * s_h + slot(c)];
        let mut r = Vec::with_capacity(3 * proj.n_magic());
        for ch in 0..3 {
            for &cell in proj.magic_points() {
                r.push(self.residual_entry(cell, ch, &get, &get_prev));
            }
        }
        Ok(r)
    }

    fn step(&self, state_prev: &Field) -> Result<Field> {
        let n = self.grid.n_cells();
        let sys = assemble_swe(state_prev, self)?;
        let u = solve_sparse(&sys.momentum, &sys.momentum_rhs, &self.solver)?;
        let mut cont_solver = self.solver;
        cont_solver.max_iters = 10 * n.max(10);
        let h = solve_sparse(&sys.continuity, &sys.continuity_rhs, &cont_solver)?;
        let mut values = u;
        values.extend_from_slice(&h);
        Field::from_values(3, n, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_submesh, restrict, RestrictTarget};

    fn problem(nx: usize) -> SweProblem {
        SweProblem::benchmark(Grid::unit(nx, nx).unwrap(), 0.2, 0.01).unwrap()
    }

    #[test]
    fn initial_condition_bump_and_background() {
        // 5x5 grid has a cell center exactly at (0.5, 0.5)
        let g = Grid::unit(5, 5).unwrap();
        let mu = 0.25;
        let f = initial_condition_swe(&g, mu);
        let center = g.cell_index(2, 2);
        assert!((f.get(2, center) - 2.0 * mu).abs() < 1e-12);
        // far corner cell center (0.9, 0.9) is outside the bump support
        let corner = g.cell_index(4, 4);
        assert!((f.get(2, corner) - mu).abs() < 1e-12);
        for ch in 0..2 {
            assert!(f.channel(ch).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lake_at_rest_is_preserved() {
        let p = problem(8);
        let n = p.grid.n_cells();
        let mut state = Field::zeros(3, n);
        state.channel_mut(2).fill(0.3);
        let next = p.step(&state).unwrap();
        for cell in 0..n {
            assert!(next.get(0, cell).abs() < 1e-10);
            assert!(next.get(1, cell).abs() < 1e-10);
            assert!((next.get(2, cell) - 0.3).abs() < 1e-10);
        }
    }

    #[test]
    fn depth_gradient_of_linear_profile_is_one() {
        let g = Grid::unit(8, 8).unwrap();
        let p = problem(8);
        let n = g.n_cells();
        let mut state = Field::zeros(3, n);
        for cell in 0..n {
            let (x, _) = g.cell_center(cell);
            state.set(2, cell, x);
        }
        let prev = |ch: usize, c: usize| state.get(ch, c);
        for iy in 1..7 {
            for ix in 1..7 {
                let cell = g.cell_index(ix, iy);
                let gx = p.depth_gradient(cell, 0, &prev);
                let gy = p.depth_gradient(cell, 1, &prev);
                assert!((gx - 1.0).abs() < 1e-10, "gx = {gx}");
                assert!(gy.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_conserves_water_volume() {
        let p = problem(12);
        let state = initial_condition_swe(&p.grid, 0.2);
        let next = p.step(&state).unwrap();
        let vol = p.grid.cell_volume();
        let before: f64 = state.channel(2).iter().sum::<f64>() * vol;
        let after: f64 = next.channel(2).iter().sum::<f64>() * vol;
        assert!(
            ((after - before) / before).abs() < 1e-10,
            "volume drift {}",
            (after - before) / before
        );
    }

    #[test]
    fn residual_is_affine_in_state() {
        let p = problem(6);
        let n = p.grid.n_cells();
        let mk = |seed: u64, base: f64| {
            let vals: Vec<f64> = (0..3 * n)
                .map(|i| base + (((i as u64 + seed) as f64) * 0.481).sin() * 0.05)
                .collect();
            Field::from_values(3, n, vals).unwrap()
        };
        let prev = mk(5, 0.3);
        let s1 = mk(17, 0.3);
        let s2 = mk(41, 0.25);
        let a = 0.6;
        let blend_vals: Vec<f64> = s1
            .values()
            .iter()
            .zip(s2.values())
            .map(|(x, y)| a * x + (1.0 - a) * y)
            .collect();
        let blend = Field::from_values(3, n, blend_vals).unwrap();
        let r1 = p.residual(&s1, &prev).unwrap();
        let r2 = p.residual(&s2, &prev).unwrap();
        let rb = p.residual(&blend, &prev).unwrap();
        for i in 0..3 * n {
            let expect = a * r1[i] + (1.0 - a) * r2[i];
            assert!((rb[i] - expect).abs() < 1e-10, "row {i}");
        }
    }

    #[test]
    fn solved_step_has_small_residual() {
        let p = problem(8);
        let prev = initial_condition_swe(&p.grid, 0.2);
        let next = p.step(&prev).unwrap();
        let r = p.residual(&next, &prev).unwrap();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-9, "residual norm {norm}");
    }

    #[test]
    fn restricted_residual_equals_gathered_full_residual() {
        let p = problem(6);
        let n = p.grid.n_cells();
        let proj = build_submesh(&p.grid, &[8, 15, 27], 2).unwrap();
        let mk = |seed: u64| {
            let vals: Vec<f64> = (0..3 * n)
                .map(|i| 0.3 + (((i as u64).wrapping_mul(seed)) as f64 * 1e-4).sin() * 0.1)
                .collect();
            Field::from_values(3, n, vals).unwrap()
        };
        let state = mk(13);
        let prev = mk(37);
        let full = p.residual(&state, &prev).unwrap();
        let state_h = restrict(&state, &proj, RestrictTarget::Halo).unwrap();
        let prev_h = restrict(&prev, &proj, RestrictTarget::Halo).unwrap();
        let restricted = p.residual_restricted(&state_h, &prev_h, &proj).unwrap();
        let mut gathered = Vec::new();
        for ch in 0..3 {
            for &c in proj.magic_points() {
                gathered.push(full[ch * n + c]);
            }
        }
        assert_eq!(restricted, gathered);
    }

    #[test]
    fn shallow_stencil_projector_is_rejected() {
        let p = problem(6);
        let proj = build_submesh(&p.grid, &[8], 1).unwrap();
        let state = vec![0.1; 3 * proj.n_halo()];
        assert!(p.residual_restricted(&state, &state, &proj).is_err());
    }

    #[test]
    fn nonpositive_depth_is_a_domain_error() {
        let p = problem(4);
        let mut state = initial_condition_swe(&p.grid, 0.2);
        state.set(2, 5, 0.0);
        match assemble_swe(&state, &p) {
            Err(Error::Domain(_)) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
    }
}
