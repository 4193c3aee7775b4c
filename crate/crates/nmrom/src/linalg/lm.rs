//! Levenberg-Marquardt driver with finite-difference Jacobians and a hard
//! residual-evaluation budget.
//!
//! The budget counts every residual call, including the forward differences
//! used to build the Jacobian, so with a 4-dimensional unknown a budget of 7
//! allows one full iteration plus one extra line-search probe. Convergence
//! tolerances default to machine precision, which makes the budget the
//! effective stopping rule.

use nalgebra::{DMatrix, DVector};

/// How the Jacobian of the residual is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    /// Forward finite differences with step `LmConfig::fd_step`.
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct LmConfig {
    /// Hard cap on residual evaluations (Jacobian columns included).
    pub max_residual_evals: usize,
    /// Initial damping factor.
    pub lambda0: f64,
    /// Finite-difference step for Jacobian columns.
    pub fd_step: f64,
    /// Stop when the residual norm falls at or below this.
    pub tol_residual: f64,
    /// Stop when the scaled gradient norm falls below this.
    pub tol_gradient: f64,
    /// Stop when the accepted step norm falls below this.
    pub tol_step: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_residual_evals: 7,
            lambda0: 1e-3,
            fd_step: 1e-5,
            tol_residual: f64::EPSILON,
            tol_gradient: f64::EPSILON,
            tol_step: f64::EPSILON,
        }
    }
}

impl LmConfig {
    pub fn with_budget(budget: usize) -> Self {
        Self {
            max_residual_evals: budget.max(2),
            ..Self::default()
        }
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmOutcome {
    BudgetExhausted,
    ResidualTolerance,
    GradientTolerance,
    StepTolerance,
    /// Residual became non-finite; the last good iterate was returned.
    Aborted,
}

#[derive(Debug, Clone)]
pub struct LmDiagnostics {
    pub n_evals: usize,
    pub n_iterations: usize,
    pub n_accepted: usize,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub outcome: LmOutcome,
}

struct Budget<'f> {
    f: &'f mut dyn FnMut(&[f64]) -> Vec<f64>,
    used: usize,
    max: usize,
}

impl Budget<'_> {
    /// Evaluates the residual if budget remains. `Ok(None)` means exhausted.
    fn eval(&mut self, z: &[f64]) -> Result<Option<DVector<f64>>, ()> {
        if self.used >= self.max {
            return Ok(None);
        }
        self.used += 1;
        let r = (self.f)(z);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(());
        }
        Ok(Some(DVector::from_vec(r)))
    }
}

/// Minimizes `|residual(z)|^2` starting from `z0`.
///
/// The damping term is scaled by the diagonal of the Gauss-Newton matrix, the
/// step length is chosen by backtracking over `{1, 0.5, 0.25}` accepting the
/// first decrease, and the damping factor shrinks by 3 on acceptance and
/// doubles on rejection. The returned iterate never has a larger residual
/// norm than `z0`.
pub fn levenberg_marquardt(
    residual_fn: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    _mode: JacobianMode,
    z0: &[f64],
    cfg: &LmConfig,
) -> (Vec<f64>, LmDiagnostics) {
    let n = z0.len();
    let mut budget = Budget {
        f: residual_fn,
        used: 0,
        max: cfg.max_residual_evals.max(1),
    };
    let mut z = DVector::from_column_slice(z0);
    let mut lambda = cfg.lambda0;

    let finish = |z: &DVector<f64>, diag: LmDiagnostics| (z.as_slice().to_vec(), diag);

    let r0 = match budget.eval(z.as_slice()) {
        Ok(Some(r)) => r,
        _ => {
            // either no budget at all or non-finite at the start
            return finish(
                &z,
                LmDiagnostics {
                    n_evals: budget.used,
                    n_iterations: 0,
                    n_accepted: 0,
                    initial_norm: f64::NAN,
                    final_norm: f64::NAN,
                    outcome: LmOutcome::Aborted,
                },
            );
        }
    };
    let initial_norm = r0.norm();
    let mut best_norm = initial_norm;
    let mut r = r0;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut outcome = LmOutcome::BudgetExhausted;

    if best_norm <= cfg.tol_residual {
        outcome = LmOutcome::ResidualTolerance;
    } else {
        'outer: loop {
            // forward-difference Jacobian, one budgeted evaluation per column
            let mut jac = DMatrix::zeros(r.len(), n);
            for i in 0..n {
                let mut zp = z.clone();
                zp[i] += cfg.fd_step;
                match budget.eval(zp.as_slice()) {
                    Ok(Some(ri)) => {
                        for k in 0..r.len() {
                            jac[(k, i)] = (ri[k] - r[k]) / cfg.fd_step;
                        }
                    }
                    Ok(None) => break 'outer,
                    Err(()) => {
                        outcome = LmOutcome::Aborted;
                        break 'outer;
                    }
                }
            }
            iterations += 1;
            let jtj = jac.transpose() * &jac;
            let grad = jac.transpose() * &r;
            if grad.amax() <= cfg.tol_gradient {
                outcome = LmOutcome::GradientTolerance;
                break;
            }

            // damping scaled by the normal-matrix diagonal
            let mut improved = false;
            loop {
                let mut a = jtj.clone();
                for i in 0..n {
                    let d = jtj[(i, i)].max(1e-12);
                    a[(i, i)] += lambda * d;
                }
                let delta = match a.clone().cholesky() {
                    Some(ch) => ch.solve(&(-&grad)),
                    None => match a.lu().solve(&(-&grad)) {
                        Some(d) => d,
                        None => {
                            lambda *= 2.0;
                            continue;
                        }
                    },
                };

                let mut step_accepted = false;
                for &alpha in &[1.0, 0.5, 0.25] {
                    let cand = &z + &delta * alpha;
                    match budget.eval(cand.as_slice()) {
                        Ok(Some(rc)) => {
                            let norm = rc.norm();
                            if norm < best_norm {
                                let step_norm = (alpha * delta.norm()).abs();
                                z = cand;
                                r = rc;
                                best_norm = norm;
                                lambda /= 3.0;
                                accepted += 1;
                                step_accepted = true;
                                improved = true;
                                if best_norm <= cfg.tol_residual {
                                    outcome = LmOutcome::ResidualTolerance;
                                    break 'outer;
                                }
                                if step_norm <= cfg.tol_step {
                                    outcome = LmOutcome::StepTolerance;
                                    break 'outer;
                                }
                                break;
                            }
                        }
                        Ok(None) => break 'outer,
                        Err(()) => {
                            outcome = LmOutcome::Aborted;
                            break 'outer;
                        }
                    }
                }
                if step_accepted {
                    break;
                }
                // all probes rejected at this damping level
                lambda *= 2.0;
                if budget.used >= budget.max {
                    break 'outer;
                }
            }
            let _ = improved;
        }
    }

    let diag = LmDiagnostics {
        n_evals: budget.used,
        n_iterations: iterations,
        n_accepted: accepted,
        initial_norm,
        final_norm: best_norm,
        outcome,
    };
    finish(&z, diag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_residual<'a>(
        a: &'a DMatrix<f64>,
        b: &'a DVector<f64>,
    ) -> impl FnMut(&[f64]) -> Vec<f64> + 'a {
        move |z: &[f64]| {
            let zv = DVector::from_column_slice(z);
            (a * zv - b).as_slice().to_vec()
        }
    }

    #[test]
    fn linear_problem_converges_to_least_squares_solution() {
        let a = DMatrix::from_row_slice(
            6,
            3,
            &[
                2.0, 0.3, -0.5, 0.1, 1.5, 0.2, -0.7, 0.4, 1.1, 0.9, -0.2, 0.6, 0.05, 0.8, -1.3,
                1.2, 0.7, 0.3,
            ],
        );
        let b = DVector::from_row_slice(&[1.0, -0.5, 0.25, 2.0, -1.0, 0.75]);
        // normal-equations oracle
        let expect = (a.transpose() * &a)
            .cholesky()
            .unwrap()
            .solve(&(a.transpose() * &b));

        let cfg = LmConfig {
            max_residual_evals: 400,
            ..LmConfig::default()
        };
        let mut f = affine_residual(&a, &b);
        let (z, diag) = levenberg_marquardt(&mut f, JacobianMode::FiniteDifference, &[0.0; 3], &cfg);
        for i in 0..3 {
            assert!(
                (z[i] - expect[i]).abs() < 1e-7,
                "component {i}: {} vs {}",
                z[i],
                expect[i]
            );
        }
        assert!(diag.final_norm <= diag.initial_norm);
    }

    #[test]
    fn already_optimal_start_returns_after_one_evaluation() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let mut f = affine_residual(&a, &b);
        let (z, diag) = levenberg_marquardt(
            &mut f,
            JacobianMode::FiniteDifference,
            &[1.0, 2.0, 3.0],
            &LmConfig::default(),
        );
        assert_eq!(diag.n_evals, 1);
        assert_eq!(diag.outcome, LmOutcome::ResidualTolerance);
        assert_eq!(z, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn budget_accounting_with_four_unknowns() {
        // budget 7, dimension 4: base + Jacobian = 5 evals, then at most two
        // line-search probes fit
        let a = DMatrix::<f64>::from_fn(5, 4, |i, j| if i == j { 1.0 } else { 0.1 });
        let b = DVector::from_element(5, 1.0);
        let mut count = 0usize;
        let mut f = |z: &[f64]| {
            count += 1;
            let zv = DVector::from_column_slice(z);
            (&a * zv - &b).as_slice().to_vec()
        };
        let cfg = LmConfig::default();
        let (_, diag) = levenberg_marquardt(&mut f, JacobianMode::FiniteDifference, &[0.0; 4], &cfg);
        assert_eq!(diag.n_evals, count);
        assert!(diag.n_evals <= 7);
        assert!(diag.n_iterations <= 1 + 1);
        assert!(diag.final_norm < diag.initial_norm);
    }

    #[test]
    fn non_finite_residual_aborts_with_last_good_iterate() {
        let mut f = |z: &[f64]| {
            if z[0] > 0.5 {
                vec![f64::NAN]
            } else {
                vec![z[0] - 10.0]
            }
        };
        let cfg = LmConfig {
            max_residual_evals: 50,
            ..LmConfig::default()
        };
        let (z, diag) = levenberg_marquardt(&mut f, JacobianMode::FiniteDifference, &[0.0], &cfg);
        assert_eq!(diag.outcome, LmOutcome::Aborted);
        assert!(z[0] <= 0.5);
        assert!(diag.final_norm <= diag.initial_norm);
    }

    #[test]
    fn accepted_norms_never_increase() {
        // mildly nonlinear residual
        let mut f = |z: &[f64]| vec![z[0] * z[0] - 2.0, z[1] - 1.0, (z[0] * z[1]).sin()];
        let cfg = LmConfig {
            max_residual_evals: 60,
            ..LmConfig::default()
        };
        let (_, diag) =
            levenberg_marquardt(&mut f, JacobianMode::FiniteDifference, &[3.0, -2.0], &cfg);
        assert!(diag.final_norm <= diag.initial_norm);
        assert!(diag.n_accepted >= 1);
    }
}
