//! One latent time step minimizes the discrete residual of the decoded
//! state over the latent coordinates. Hyper-reduced variants evaluate the
//! residual only at the collocation cells, assembled either from the full
//! decoder restricted to the submesh or from a compressed decoder that
//! never touches the full grid. The gappy variant additionally fits the
//! sampled residual in a basis by least squares.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::autoencoder::{CaeModel, CompressedDecoder};
use crate::fvm::DiscreteProblem;
use crate::grid::{restrict, RestrictTarget, SubmeshProjector};
use crate::linalg::{levenberg_marquardt, pseudo_inverse, JacobianMode, LmConfig, LmDiagnostics};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    NmLspg,
    Roc,
    RocTs,
    Gnat,
    GnatTs,
}

impl VariantKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantKind::NmLspg => "nm-lspg",
            VariantKind::Roc => "nm-lspg-roc",
            VariantKind::RocTs => "nm-lspg-roc-ts",
            VariantKind::Gnat => "nm-lspg-gnat",
            VariantKind::GnatTs => "nm-lspg-gnat-ts",
        }
    }

    pub fn hyper_reduced(&self) -> bool {
        !matches!(self, VariantKind::NmLspg)
    }

    pub fn uses_ts(&self) -> bool {
        matches!(self, VariantKind::RocTs | VariantKind::GnatTs)
    }

    pub fn uses_gnat(&self) -> bool {
        matches!(self, VariantKind::Gnat | VariantKind::GnatTs)
    }
}

impl std::str::FromStr for VariantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nm-lspg" => Ok(VariantKind::NmLspg),
            "nm-lspg-roc" => Ok(VariantKind::Roc),
            "nm-lspg-roc-ts" => Ok(VariantKind::RocTs),
            "nm-lspg-gnat" => Ok(VariantKind::Gnat),
            "nm-lspg-gnat-ts" => Ok(VariantKind::GnatTs),
            other => Err(Error::Argument(format!("unknown variant '{other}'"))),
        }
    }
}

/// Decoder used to evaluate states during the latent solve.
pub enum RomDecoder<'a> {
    Full(&'a CaeModel),
    Compressed(&'a CompressedDecoder),
}

/// Least-squares fit of the sampled residual in a basis: the reduced
/// residual is `(P Phi)^+ (P r)`.
#[derive(Debug, Clone)]
pub struct GnatProjector {
    reduced: DMatrix<f64>,
}

impl GnatProjector {
    pub fn n_modes(&self) -> usize {
        self.reduced.nrows()
    }

    pub fn apply(&self, sampled: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(sampled);
        (&self.reduced * v).as_slice().to_vec()
    }
}

/// Builds the gappy projector from a basis over the full degrees of freedom
/// and the collocation cells. Basis rows are gathered channel-major at the
/// magic points, matching the restricted-residual layout.
pub fn build_gnat(
    phi: &DMatrix<f64>,
    proj: &SubmeshProjector,
    channels: usize,
) -> Result<GnatProjector> {
    let n_cells = proj.n_cells();
    if phi.nrows() != channels * n_cells {
        return Err(Error::Shape(format!(
            "basis has {} rows, expected {}",
            phi.nrows(),
            channels * n_cells
        )));
    }
    let m = channels * proj.n_magic();
    if phi.ncols() > m {
        return Err(Error::Argument(format!(
            "{} basis vectors cannot be fitted on {m} sampled rows",
            phi.ncols()
        )));
    }
    let mut sampled = DMatrix::zeros(m, phi.ncols());
    let mut row = 0;
    for ch in 0..channels {
        for &mp in proj.magic_points() {
            for c in 0..phi.ncols() {
                sampled[(row, c)] = phi[(ch * n_cells + mp, c)];
            }
            row += 1;
        }
    }
    // rank diagnostics: the pseudo-inverse tolerates deficiency, but warn
    let svd = sampled.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= smax * 1e-12 {
        log::warn!("sampled basis is rank-deficient (sigma_min/sigma_max = {:.3e})", smin / smax);
    }
    Ok(GnatProjector {
        reduced: pseudo_inverse(&sampled),
    })
}

/// A configured reduced-order variant, borrowing its trained pieces.
pub struct RomVariant<'a> {
    pub kind: VariantKind,
    pub decoder: RomDecoder<'a>,
    pub proj: Option<&'a SubmeshProjector>,
    pub gnat: Option<GnatProjector>,
}

impl<'a> RomVariant<'a> {
    pub fn full(cae: &'a CaeModel) -> Self {
        Self {
            kind: VariantKind::NmLspg,
            decoder: RomDecoder::Full(cae),
            proj: None,
            gnat: None,
        }
    }

    pub fn hyper(
        kind: VariantKind,
        decoder: RomDecoder<'a>,
        proj: &'a SubmeshProjector,
        gnat: Option<GnatProjector>,
    ) -> Result<Self> {
        if !kind.hyper_reduced() {
            return Err(Error::Argument("use RomVariant::full for the dense variant".into()));
        }
        if kind.uses_ts() && !matches!(decoder, RomDecoder::Compressed(_)) {
            return Err(Error::Config(format!(
                "{} needs a compressed decoder",
                kind.as_str()
            )));
        }
        if !kind.uses_ts() && !matches!(decoder, RomDecoder::Full(_)) {
            return Err(Error::Config(format!(
                "{} restricts the full decoder",
                kind.as_str()
            )));
        }
        if kind.uses_gnat() && gnat.is_none() {
            return Err(Error::Config(format!("{} needs a sampled basis", kind.as_str())));
        }
        if let RomDecoder::Compressed(ts) = &decoder {
            if ts.halo != proj.halo() {
                return Err(Error::Config(
                    "compressed decoder was trained on a different submesh".into(),
                ));
            }
        }
        Ok(Self {
            kind,
            decoder,
            proj: Some(proj),
            gnat,
        })
    }

    /// Checks stencil coverage against the problem before any stepping.
    pub fn validate(&self, problem: &dyn DiscreteProblem) -> Result<()> {
        if let Some(proj) = self.proj {
            if proj.layers() < problem.stencil_layers() {
                return Err(Error::Config(format!(
                    "projector depth {} below the required {} layer(s)",
                    proj.layers(),
                    problem.stencil_layers()
                )));
            }
            proj.covers_stencils(problem.grid(), problem.stencil_layers())?;
        }
        Ok(())
    }

    fn decode_halo(&self, z: &[f64], proj: &SubmeshProjector) -> Result<Vec<f64>> {
        match &self.decoder {
            RomDecoder::Full(cae) => {
                let field = cae.decode(z)?;
                restrict(&field, proj, RestrictTarget::Halo)
            }
            RomDecoder::Compressed(ts) => ts.decode_halo(z),
        }
    }
}

/// One latent step of the dense variant: minimizes the full residual of the
/// decoded state, warm-started at the previous latent state.
pub fn nm_lspg_step(
    problem: &dyn DiscreteProblem,
    cae: &CaeModel,
    z_prev: &[f64],
    cfg: &LmConfig,
) -> Result<(Vec<f64>, LmDiagnostics)> {
    let prev_field = cae.decode(z_prev)?;
    let mut residual_fn = |z: &[f64]| -> Vec<f64> {
        match cae.decode(z).and_then(|f| problem.residual(&f, &prev_field)) {
            Ok(r) => r,
            Err(_) => vec![f64::NAN],
        }
    };
    let (z, diag) = levenberg_marquardt(
        &mut residual_fn,
        JacobianMode::FiniteDifference,
        z_prev,
        cfg,
    );
    Ok((z, diag))
}

/// One latent step of a hyper-reduced variant.
pub fn hyper_reduced_step(
    problem: &dyn DiscreteProblem,
    variant: &RomVariant,
    z_prev: &[f64],
    cfg: &LmConfig,
) -> Result<(Vec<f64>, LmDiagnostics)> {
    let proj = variant
        .proj
        .ok_or_else(|| Error::Config("hyper-reduced variant without a projector".into()))?;
    let prev_halo = variant.decode_halo(z_prev, proj)?;
    let mut residual_fn = |z: &[f64]| -> Vec<f64> {
        let out = variant.decode_halo(z, proj).and_then(|halo| {
            let r = problem.residual_restricted(&halo, &prev_halo, proj)?;
            Ok(match &variant.gnat {
                Some(g) => g.apply(&r),
                None => r,
            })
        });
        match out {
            Ok(r) => r,
            Err(_) => vec![f64::NAN],
        }
    };
    let (z, diag) = levenberg_marquardt(
        &mut residual_fn,
        JacobianMode::FiniteDifference,
        z_prev,
        cfg,
    );
    Ok((z, diag))
}

/// Latent trajectory with per-step solver diagnostics.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Residual evaluations per step (the initial state has none).
    pub n_evals: Vec<usize>,
    pub step_ms: Vec<f64>,
    /// Index of the first failed step, if the trajectory was truncated.
    pub failure: Option<usize>,
    /// Residual-evaluation budget the trajectory ran with.
    pub budget: usize,
}

impl LatentTrajectory {
    pub fn max_evals_per_step(&self) -> usize {
        self.n_evals.iter().copied().max().unwrap_or(0)
    }

    pub fn mean_step_ms(&self) -> f64 {
        if self.step_ms.is_empty() {
            0.0
        } else {
            self.step_ms.iter().sum::<f64>() / self.step_ms.len() as f64
        }
    }

    /// Median jump between consecutive latent states.
    pub fn median_latent_step(&self) -> f64 {
        let mut jumps: Vec<f64> = self
            .states
            .windows(2)
            .map(|w| {
                w[0].iter()
                    .zip(&w[1])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        if jumps.is_empty() {
            return 0.0;
        }
        jumps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        jumps[jumps.len() / 2]
    }
}

/// Evolves the latent state from `z0` at `t0` to the problem horizon with
/// the problem's own time step. A step whose solver aborts truncates the
/// trajectory; with `escalate` the whole trajectory is retried once with a
/// budget of 13 residual evaluations.
pub fn rollout(
    problem: &dyn DiscreteProblem,
    variant: &RomVariant,
    z0: &[f64],
    t0: f64,
    cfg: &LmConfig,
    escalate: bool,
) -> Result<LatentTrajectory> {
    variant.validate(problem)?;
    let traj = rollout_once(problem, variant, z0, t0, cfg)?;
    if traj.failure.is_some() && escalate && cfg.max_residual_evals < 13 {
        log::warn!(
            "latent step {} failed with budget {}; retrying the trajectory with 13",
            traj.failure.unwrap(),
            cfg.max_residual_evals
        );
        let mut escalated_cfg = cfg.clone();
        escalated_cfg.max_residual_evals = 13;
        let retry = rollout_once(problem, variant, z0, t0, &escalated_cfg)?;
        if retry.failure.is_none() {
            return Ok(retry);
        }
        return Ok(if retry.states.len() >= traj.states.len() { retry } else { traj });
    }
    Ok(traj)
}

fn rollout_once(
    problem: &dyn DiscreteProblem,
    variant: &RomVariant,
    z0: &[f64],
    t0: f64,
    cfg: &LmConfig,
) -> Result<LatentTrajectory> {
    let dt = problem.dt();
    let n_steps = ((problem.t_final() - t0) / dt).round().max(0.0) as usize;
    let mut traj = LatentTrajectory {
        times: vec![t0],
        states: vec![z0.to_vec()],
        n_evals: Vec::with_capacity(n_steps),
        step_ms: Vec::with_capacity(n_steps),
        failure: None,
        budget: cfg.max_residual_evals,
    };
    let mut z = z0.to_vec();
    for step in 1..=n_steps {
        let clock = Instant::now();
        let (z_next, diag) = match variant.kind {
            VariantKind::NmLspg => match &variant.decoder {
                RomDecoder::Full(cae) => nm_lspg_step(problem, cae, &z, cfg)?,
                RomDecoder::Compressed(_) => {
                    return Err(Error::Config(
                        "dense variant cannot run on a compressed decoder".into(),
                    ))
                }
            },
            _ => hyper_reduced_step(problem, variant, &z, cfg)?,
        };
        traj.step_ms.push(clock.elapsed().as_secs_f64() * 1e3);
        traj.n_evals.push(diag.n_evals);
        if diag.outcome == crate::linalg::LmOutcome::Aborted {
            traj.failure = Some(step);
            log::warn!("latent solver aborted at step {step}");
            break;
        }
        z = z_next;
        traj.times.push(t0 + step as f64 * dt);
        traj.states.push(z.clone());
    }
    if !traj.n_evals.is_empty() {
        let median = traj.median_latent_step();
        if median > 0.0 && cfg.fd_step > 0.1 * median {
            log::warn!(
                "finite-difference step {:.2e} is large next to the median latent jump {:.2e}",
                cfg.fd_step,
                median
            );
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{build_cae, build_compressed_decoder};
    use crate::fvm::{NclProblem, ProblemId};
    use crate::grid::{build_submesh, Grid};
    use crate::neural::DetRng;

    fn tiny_problem() -> NclProblem {
        NclProblem::benchmark(Grid::unit(12, 12).unwrap(), 1.0, 0.005).unwrap()
    }

    #[test]
    fn saturated_roc_reproduces_the_dense_variant_bitwise() {
        let p = tiny_problem();
        let cae = build_cae(ProblemId::Ncl, 12, 12, 33).unwrap();
        let all: Vec<usize> = (0..144).collect();
        let proj = build_submesh(&p.grid, &all, 1).unwrap();
        let z0 = cae.encode(&p.initial_condition()).unwrap();
        let cfg = LmConfig::default();

        let dense = RomVariant::full(&cae);
        let roc = RomVariant::hyper(VariantKind::Roc, RomDecoder::Full(&cae), &proj, None).unwrap();
        let ta = rollout(&p, &dense, &z0, 0.0, &cfg, false).unwrap();
        let tb = rollout(&p, &roc, &z0, 0.0, &cfg, false).unwrap();
        assert_eq!(ta.states.len(), tb.states.len());
        for (a, b) in ta.states.iter().zip(&tb.states) {
            for (x, y) in a.iter().zip(b) {
                assert!(
                    (x - y).abs() < 1e-12,
                    "latent states diverged: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn gnat_with_selection_basis_equals_roc() {
        // basis = transpose of the selection operator: the gappy fit is the
        // identity on the sampled rows
        let p = tiny_problem();
        let cae = build_cae(ProblemId::Ncl, 12, 12, 34).unwrap();
        let mps = vec![14usize, 27, 61, 88, 105];
        let proj = build_submesh(&p.grid, &mps, 1).unwrap();
        let n_rows = 2 * 144;
        let m = 2 * proj.n_magic();
        let mut phi = DMatrix::zeros(n_rows, m);
        let mut col = 0;
        for ch in 0..2 {
            for &mp in proj.magic_points() {
                phi[(ch * 144 + mp, col)] = 1.0;
                col += 1;
            }
        }
        let gnat = build_gnat(&phi, &proj, 2).unwrap();
        let z0 = cae.encode(&p.initial_condition()).unwrap();
        let cfg = LmConfig::default();
        let roc = RomVariant::hyper(VariantKind::Roc, RomDecoder::Full(&cae), &proj, None).unwrap();
        let gn = RomVariant::hyper(VariantKind::Gnat, RomDecoder::Full(&cae), &proj, Some(gnat))
            .unwrap();
        let ta = rollout(&p, &roc, &z0, 0.0, &cfg, false).unwrap();
        let tb = rollout(&p, &gn, &z0, 0.0, &cfg, false).unwrap();
        for (a, b) in ta.states.iter().zip(&tb.states) {
            assert_eq!(a, b, "gappy fit with the selection basis must be exact");
        }
    }

    #[test]
    fn gnat_projector_is_idempotent() {
        // dense check of the projection operator built from a random basis
        let grid = Grid::unit(6, 6).unwrap();
        let mps = vec![7usize, 14, 20, 28];
        let proj = build_submesh(&grid, &mps, 1).unwrap();
        let channels = 1usize;
        let d = 36;
        let mut rng = DetRng::new(9);
        let phi = DMatrix::from_fn(d, 3, |_, _| rng.uniform(1.0));
        let gnat = build_gnat(&phi, &proj, channels).unwrap();
        // p = phi (P phi)^+ P as a dense operator
        let mut p_mat = DMatrix::zeros(proj.n_magic(), d);
        for (i, &mp) in proj.magic_points().iter().enumerate() {
            p_mat[(i, mp)] = 1.0;
        }
        let proj_op = &phi * &gnat.reduced * &p_mat;
        let twice = &proj_op * &proj_op;
        assert!((&twice - &proj_op).norm() < 1e-10);
    }

    #[test]
    fn stationary_state_stays_put() {
        // zero dynamics: a decoder output that is a steady state of the
        // problem keeps the latent state within the finite-difference step
        let mut p = tiny_problem();
        p.nu = 0.0;
        let mut cae = build_cae(ProblemId::Ncl, 12, 12, 35).unwrap();
        // force the decoder to output the zero field regardless of z
        for h in &mut cae.heads {
            let flat = vec![0.0; h.net.params_flat().len()];
            h.net.set_params_flat(&flat).unwrap();
        }
        let z0 = vec![0.1, -0.2, 0.3, 0.4];
        let cfg = LmConfig::default();
        let (z, diag) = nm_lspg_step(&p, &cae, &z0, &cfg).unwrap();
        // the residual is already zero, so the first evaluation stops
        assert_eq!(diag.n_evals, 1);
        assert_eq!(z, z0);
    }

    #[test]
    fn variant_invariants_are_enforced() {
        let cae = build_cae(ProblemId::Ncl, 12, 12, 36).unwrap();
        let grid = Grid::unit(12, 12).unwrap();
        let proj = build_submesh(&grid, &[5, 17], 1).unwrap();
        // ts variant needs a compressed decoder
        assert!(RomVariant::hyper(VariantKind::RocTs, RomDecoder::Full(&cae), &proj, None).is_err());
        // non-ts variant restricts the full decoder
        let ts = build_compressed_decoder(ProblemId::Ncl, &proj, &[16], 1).unwrap();
        assert!(RomVariant::hyper(VariantKind::Roc, RomDecoder::Compressed(&ts), &proj, None).is_err());
        // gappy variant needs the basis
        assert!(RomVariant::hyper(VariantKind::Gnat, RomDecoder::Full(&cae), &proj, None).is_err());
        // mismatched submesh is rejected
        let other = build_submesh(&grid, &[3, 90], 1).unwrap();
        assert!(
            RomVariant::hyper(VariantKind::RocTs, RomDecoder::Compressed(&ts), &other, None)
                .is_err()
        );
    }

    #[test]
    fn budget_is_respected_along_a_trajectory() {
        let p = tiny_problem();
        let cae = build_cae(ProblemId::Ncl, 12, 12, 37).unwrap();
        let z0 = cae.encode(&p.initial_condition()).unwrap();
        let variant = RomVariant::full(&cae);
        let traj = rollout(&p, &variant, &z0, 0.0, &LmConfig::default(), false).unwrap();
        assert!(traj.max_evals_per_step() <= 7);
        assert_eq!(traj.states.len(), traj.times.len());
    }

    #[test]
    fn zero_horizon_rollout_is_the_initial_state() {
        let p = tiny_problem();
        let cae = build_cae(ProblemId::Ncl, 12, 12, 38).unwrap();
        let z0 = vec![0.0; 4];
        let variant = RomVariant::full(&cae);
        let traj = rollout(&p, &variant, &z0, p.t_final, &LmConfig::default(), false).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.states[0], z0);
    }
}
