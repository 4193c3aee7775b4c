//! Jacobi-preconditioned iterative solvers for the sparse systems produced
//! by the finite-volume assembly.

use crate::fvm::{IterativeMethod, LinearSolverConfig, SparseOperator};
use crate::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn residual_norm(a: &SparseOperator, x: &[f64], b: &[f64], scratch: &mut [f64]) -> f64 {
    a.matvec_into(x, scratch);
    scratch
        .iter()
        .zip(b)
        .map(|(ax, bi)| {
            let r = bi - ax;
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Solves `A x = b` to `|Ax - b| <= max(abs_tol, rel_tol * |b|)`.
pub fn solve_sparse(a: &SparseOperator, b: &[f64], cfg: &LinearSolverConfig) -> Result<Vec<f64>> {
    if b.len() != a.dim() {
        return Err(Error::Shape(format!(
            "rhs length {} does not match operator dimension {}",
            b.len(),
            a.dim()
        )));
    }
    let target = cfg.abs_tol.max(cfg.rel_tol * norm(b));
    if norm(b) == 0.0 {
        return Ok(vec![0.0; a.dim()]);
    }
    match cfg.method {
        IterativeMethod::BiCgStab => bicgstab(a, b, target, cfg.max_iters),
        IterativeMethod::ConjugateGradient => conjugate_gradient(a, b, target, cfg.max_iters),
        IterativeMethod::GaussSeidel => gauss_seidel(a, b, target, cfg.max_iters),
    }
}

fn inv_diagonal(a: &SparseOperator) -> Vec<f64> {
    a.diagonal()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect()
}

/// Preconditioned BiCGStab (van der Vorst) with diagonal preconditioning.
fn bicgstab(a: &SparseOperator, b: &[f64], target: f64, max_iters: usize) -> Result<Vec<f64>> {
    let n = a.dim();
    let minv = inv_diagonal(a);
    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = b.to_vec();
    let r0: Vec<f64> = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut res = norm(&r);
    if res <= target {
        return Ok(x);
    }
    for it in 0..max_iters {
        let rho_next = dot(&r0, &r);
        if rho_next.abs() < f64::MIN_POSITIVE {
            return Err(Error::Solver("BiCGStab breakdown (rho = 0)".into(), res, it));
        }
        let beta = (rho_next / rho) * (alpha / omega);
        rho = rho_next;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat: Vec<f64> = p.iter().zip(&minv).map(|(pi, mi)| pi * mi).collect();
        a.matvec_into(&phat, &mut v);
        let denom = dot(&r0, &v);
        if denom.abs() < f64::MIN_POSITIVE {
            return Err(Error::Solver("BiCGStab breakdown (r0.v = 0)".into(), res, it));
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        // first half-step may already be enough
        if norm(&s) <= target {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            let check = residual_norm(a, &x, b, &mut scratch);
            if check <= target {
                return Ok(x);
            }
            r = s;
            continue;
        }
        let shat: Vec<f64> = s.iter().zip(&minv).map(|(si, mi)| si * mi).collect();
        let mut t = vec![0.0; n];
        a.matvec_into(&shat, &mut t);
        let tt = dot(&t, &t);
        if tt < f64::MIN_POSITIVE {
            return Err(Error::Solver("BiCGStab breakdown (t = 0)".into(), res, it));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r);
        if res <= target {
            let check = residual_norm(a, &x, b, &mut scratch);
            if check <= target {
                return Ok(x);
            }
            res = check;
        }
        if omega.abs() < f64::MIN_POSITIVE {
            return Err(Error::Solver("BiCGStab breakdown (omega = 0)".into(), res, it));
        }
    }
    let achieved = residual_norm(a, &x, b, &mut scratch);
    Err(Error::Solver(
        "BiCGStab did not converge".into(),
        achieved,
        max_iters,
    ))
}

/// Jacobi-preconditioned conjugate gradient for symmetric positive systems.
fn conjugate_gradient(a: &SparseOperator, b: &[f64], target: f64, max_iters: usize) -> Result<Vec<f64>> {
    let n = a.dim();
    let minv = inv_diagonal(a);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(ri, mi)| ri * mi).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut res = norm(&r);
    if res <= target {
        return Ok(x);
    }
    for it in 0..max_iters {
        a.matvec_into(&p, &mut ap);
        let denom = dot(&p, &ap);
        if denom.abs() < f64::MIN_POSITIVE {
            return Err(Error::Solver("CG breakdown".into(), res, it));
        }
        let alpha = rz / denom;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm(&r);
        if res <= target {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * minv[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver("CG did not converge".into(), res, max_iters))
}

fn gauss_seidel(a: &SparseOperator, b: &[f64], target: f64, max_iters: usize) -> Result<Vec<f64>> {
    let n = a.dim();
    let diag = a.diagonal();
    if diag.iter().any(|&d| d.abs() < f64::MIN_POSITIVE) {
        return Err(Error::Solver(
            "Gauss-Seidel requires a nonzero diagonal".into(),
            f64::INFINITY,
            0,
        ));
    }
    let mut x = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for it in 0..max_iters {
        for i in 0..n {
            let mut acc = b[i];
            for (c, v) in a.row(i) {
                if c != i {
                    acc -= v * x[c];
                }
            }
            x[i] = acc / diag[i];
        }
        let res = residual_norm(a, &x, b, &mut scratch);
        if res <= target {
            return Ok(x);
        }
        if it == max_iters - 1 {
            return Err(Error::Solver(
                "Gauss-Seidel did not converge".into(),
                res,
                max_iters,
            ));
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvm::SparseBuilder;
    use nalgebra::{DMatrix, DVector};

    fn diagonal_operator(d: &[f64]) -> SparseOperator {
        let mut b = SparseBuilder::new(d.len());
        for (i, &v) in d.iter().enumerate() {
            b.add(i, v);
            b.finish_row();
        }
        b.build().unwrap()
    }

    /// 1D Dirichlet Laplacian, symmetric positive definite.
    fn laplacian(n: usize) -> SparseOperator {
        let mut b = SparseBuilder::new(n);
        for i in 0..n {
            b.add(i, 2.0);
            if i > 0 {
                b.add(i - 1, -1.0);
            }
            if i + 1 < n {
                b.add(i + 1, -1.0);
            }
            b.finish_row();
        }
        b.build().unwrap()
    }

    fn cfg(method: IterativeMethod) -> LinearSolverConfig {
        LinearSolverConfig {
            method,
            abs_tol: 1e-12,
            rel_tol: 1e-14,
            max_iters: 10_000,
        }
    }

    #[test]
    fn diagonal_system_is_exact() {
        let a = diagonal_operator(&[2.0, 4.0, 8.0]);
        let x = solve_sparse(&a, &[2.0, 4.0, 8.0], &cfg(IterativeMethod::BiCgStab)).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let a = laplacian(10);
        for m in [
            IterativeMethod::BiCgStab,
            IterativeMethod::ConjugateGradient,
            IterativeMethod::GaussSeidel,
        ] {
            let x = solve_sparse(&a, &vec![0.0; 10], &cfg(m)).unwrap();
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn laplacian_matches_dense_direct_solve() {
        let n = 16;
        let a = laplacian(n);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
        // dense oracle
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for (c, v) in a.row(i) {
                dense[(i, c)] = v;
            }
        }
        let oracle = dense.lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for m in [
            IterativeMethod::BiCgStab,
            IterativeMethod::ConjugateGradient,
            IterativeMethod::GaussSeidel,
        ] {
            let x = solve_sparse(&a, &b, &cfg(m)).unwrap();
            for i in 0..n {
                assert!(
                    (x[i] - oracle[i]).abs() < 1e-10,
                    "{m:?} row {i}: {} vs {}",
                    x[i],
                    oracle[i]
                );
            }
        }
    }

    #[test]
    fn iteration_cap_reports_achieved_residual() {
        let a = laplacian(50);
        let b = vec![1.0; 50];
        let tight = LinearSolverConfig {
            method: IterativeMethod::GaussSeidel,
            abs_tol: 1e-14,
            rel_tol: 0.0,
            max_iters: 3,
        };
        match solve_sparse(&a, &b, &tight) {
            Err(Error::Solver(_, achieved, iters)) => {
                assert!(achieved.is_finite() && achieved > 0.0);
                assert_eq!(iters, 3);
            }
            other => panic!("expected solver error, got {other:?}"),
        }
    }
}
