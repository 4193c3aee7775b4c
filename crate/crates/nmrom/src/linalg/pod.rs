//! Proper orthogonal decomposition and related dense helpers.

use nalgebra::{DMatrix, DVector};

use crate::snapshots::SnapshotSet;
use crate::{Error, Result};

/// Leading left singular vectors of a snapshot matrix plus the full
/// singular spectrum.
#[derive(Debug, Clone)]
pub struct PodBasis {
    /// `d x r` matrix with orthonormal columns.
    pub modes: DMatrix<f64>,
    /// All `min(d, N)` singular values, descending.
    pub singular_values: Vec<f64>,
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    /// Orthogonal projection `V V^T u`.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.modes * (self.modes.transpose() * u)
    }
}

/// Thin SVD of `x`, keeping the first `r` left singular vectors.
///
/// Columns carry a fixed sign convention (largest-magnitude entry positive,
/// first such entry on ties) so stored bases are reproducible across runs.
pub fn pod(x: &DMatrix<f64>, r: usize) -> Result<PodBasis> {
    let d_tilde = x.nrows().min(x.ncols());
    if r == 0 || r > d_tilde {
        return Err(Error::Argument(format!(
            "reduced dimension {r} out of range 1..={d_tilde}"
        )));
    }
    let svd = x.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numeric("SVD did not produce left vectors".into()))?;
    // sort descending; nalgebra does not guarantee an order
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut modes = DMatrix::zeros(x.nrows(), r);
    for (k, &i) in order.iter().take(r).enumerate() {
        let col = u.column(i);
        // sign convention: largest-magnitude entry positive
        let mut lead = 0;
        let mut best = 0.0;
        for (j, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                lead = j;
            }
        }
        let s = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..x.nrows() {
            modes[(j, k)] = s * col[j];
        }
    }
    Ok(PodBasis {
        modes,
        singular_values,
    })
}

/// Energy retained by the modes past `r`: `sqrt(sum_{i>r} sigma_i^2)`.
pub fn residual_energy(sigma: &[f64], r: usize) -> f64 {
    // accumulate from the tail for accuracy
    sigma
        .iter()
        .skip(r)
        .rev()
        .fold(0.0f64, |acc, &s| acc + s * s)
        .sqrt()
}

/// Relative projection errors of a test set onto a POD basis, aggregated per
/// parameter as (mean, max) over each time series.
///
/// Zero-norm snapshots are skipped with a warning.
pub fn projection_errors(test: &SnapshotSet, basis: &PodBasis) -> Result<Vec<(f64, f64)>> {
    if basis.modes.nrows() != test.dof() {
        return Err(Error::Shape(format!(
            "basis has {} rows, snapshots have {} degrees of freedom",
            basis.modes.nrows(),
            test.dof()
        )));
    }
    let mut out = Vec::with_capacity(test.n_params());
    for p in 0..test.n_params() {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        let mut count = 0usize;
        for t in 0..test.n_times(p) {
            let u = DVector::from_column_slice(test.column(p, t));
            let norm = u.norm();
            if norm == 0.0 {
                log::warn!("skipping zero-norm snapshot (param {p}, index {t})");
                continue;
            }
            let err = (&u - basis.project(&u)).norm() / norm;
            sum += err;
            max = max.max(err);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Domain(format!(
                "parameter {p} has no nonzero snapshots"
            )));
        }
        out.push((sum / count as f64, max));
    }
    Ok(out)
}

/// Moore-Penrose pseudo-inverse via SVD with tolerance
/// `max(nrows, ncols) * sigma_1 * 1e-14`.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.is_empty() {
        return a.transpose();
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = a.nrows().max(a.ncols()) as f64 * sigma_max * 1e-14;
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > tol {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn det_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        DMatrix::from_fn(rows, cols, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn rank_one_matrix_has_single_singular_value() {
        let u = DVector::from_fn(10, |i, _| (i as f64 + 1.0).sqrt());
        let v = DVector::from_fn(6, |i, _| 2.0 - i as f64 * 0.3);
        let x = &u * v.transpose();
        let basis = pod(&x, 1).unwrap();
        for s in &basis.singular_values[1..] {
            assert!(s.abs() < 1e-12, "trailing singular value {s}");
        }
    }

    #[test]
    fn orthonormal_input_is_reproduced_exactly() {
        // orthonormal columns from QR of a random matrix
        let x = det_matrix(12, 4, 3);
        let qr = x.qr();
        let q = qr.q();
        let basis = pod(&q, 4).unwrap();
        for j in 0..4 {
            let col = DVector::from_column_slice(q.column(j).as_slice());
            let err = (&col - basis.project(&col)).norm();
            assert!(err < 1e-10, "projection error {err}");
        }
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let x = det_matrix(20, 8, 7);
        let basis = pod(&x, 8).unwrap();
        // orthonormality
        let gram = basis.modes.transpose() * &basis.modes;
        for i in 0..8 {
            for j in 0..8 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[(i, j)], expect, epsilon = 1e-10);
            }
        }
        // projection of the range reproduces the matrix
        for c in 0..8 {
            let col = DVector::from_column_slice(x.column(c).as_slice());
            let err = (&col - basis.project(&col)).norm();
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn pod_sign_convention_is_deterministic() {
        let x = det_matrix(15, 5, 11);
        let a = pod(&x, 3).unwrap();
        let b = pod(&(-x), 3).unwrap();
        // flipping the matrix sign flips mode signs; the convention restores them
        for j in 0..3 {
            let mut lead = 0;
            let mut best = 0.0;
            for (i, v) in a.modes.column(j).iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    lead = i;
                }
            }
            assert!(a.modes[(lead, j)] > 0.0);
            assert!(b.modes[(lead, j)] > 0.0);
        }
    }

    #[test]
    fn pod_rejects_bad_rank() {
        let x = det_matrix(6, 4, 1);
        assert!(pod(&x, 0).is_err());
        assert!(pod(&x, 5).is_err());
    }

    #[test]
    fn residual_energy_edge_cases() {
        let sigma = [3.0, 2.0, 1.0];
        assert_eq!(residual_energy(&sigma, 3), 0.0);
        let full: f64 = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert_abs_diff_eq!(residual_energy(&sigma, 0), full, epsilon = 1e-15);
    }

    #[test]
    fn residual_energy_matches_frobenius_oracle() {
        let x = det_matrix(30, 10, 23);
        let basis = pod(&x, 10).unwrap();
        for r in [1usize, 3, 5, 9] {
            let vr = basis.modes.columns(0, r).clone_owned();
            let proj = &vr * vr.transpose() * &x;
            let frob = (&x - proj).norm();
            let energy = residual_energy(&basis.singular_values, r);
            assert_abs_diff_eq!(energy, frob, epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_energy_non_increasing_in_rank() {
        let x = det_matrix(25, 12, 5);
        let basis = pod(&x, 1).unwrap();
        let mut prev = f64::INFINITY;
        for r in 0..=basis.singular_values.len() {
            let e = residual_energy(&basis.singular_values, r);
            assert!(e <= prev + 1e-15);
            prev = e;
        }
    }

    #[test]
    fn pseudo_inverse_identity_and_zero() {
        let eye = DMatrix::<f64>::identity(5, 5);
        let pinv = pseudo_inverse(&eye);
        assert_abs_diff_eq!((&pinv - &eye).norm(), 0.0, epsilon = 1e-14);
        let zero = DMatrix::<f64>::zeros(4, 3);
        let pz = pseudo_inverse(&zero);
        assert_eq!(pz.nrows(), 3);
        assert_eq!(pz.ncols(), 4);
        assert_eq!(pz.norm(), 0.0);
    }

    #[test]
    fn pseudo_inverse_satisfies_penrose_condition() {
        let a = det_matrix(12, 5, 19);
        let pinv = pseudo_inverse(&a);
        let back = &a * &pinv * &a;
        assert!((&back - &a).norm() < 1e-10);
    }

    #[test]
    fn truncation_beats_random_projections() {
        let x = det_matrix(10, 6, 77);
        let basis = pod(&x, 3).unwrap();
        let vr = basis.modes.columns(0, 3).clone_owned();
        let best = (&x - &vr * vr.transpose() * &x).norm();
        for seed in 0..100u64 {
            let q = det_matrix(10, 3, 1000 + seed).qr().q();
            let err = (&x - &q * q.transpose() * &x).norm();
            assert!(best <= err + 1e-12, "seed {seed}: {best} > {err}");
        }
    }
}
