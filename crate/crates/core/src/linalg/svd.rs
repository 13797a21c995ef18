//! SVD-based oracles: compact SVD, Moore-Penrose pseudo-inverse, smallest
//! eigenvalue. All of these evaluate in double precision regardless of the
//! caller's storage precision and are the independent route against which
//! the QR/LDLT kernels are checked.
//!
//! Both decompositions are one/two-sided Jacobi iterations. Input sizes here
//! are small (priors and marginalization inputs of a few dozen columns), and
//! Jacobi converges unconditionally with high relative accuracy, which is
//! what an oracle needs.

use super::mat::{DenseMatrix, Scalar};
use super::LinalgError;

/// Compact SVD `a = u1 * diag(sigma) * v1^T` with `rank` columns kept.
pub struct CompactSvd {
    pub u1: DenseMatrix<f64>,
    pub sigma: Vec<f64>,
    pub v1: DenseMatrix<f64>,
    pub rank: usize,
}

/// One-sided Jacobi SVD of a tall matrix (rows >= cols): orthogonalizes
/// column pairs until the working matrix is `U * diag(sigma)`, accumulating
/// the right factor `V` as the product of rotations.
fn jacobi_svd_tall(a: &DenseMatrix<f64>) -> (DenseMatrix<f64>, Vec<f64>, DenseMatrix<f64>) {
    let m = a.rows();
    let n = a.cols();
    debug_assert!(m >= n);
    let mut w = a.clone();
    let mut v = DenseMatrix::<f64>::identity(n);
    let tol = 1e-15;
    let max_sweeps = 64;

    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma = vec![0.0; n];
    let mut u = DenseMatrix::<f64>::zeros(m, n);
    for k in 0..n {
        let mut ss = 0.0;
        for i in 0..m {
            ss += w[(i, k)] * w[(i, k)];
        }
        let s = ss.sqrt();
        sigma[k] = s;
        if s > 0.0 {
            for i in 0..m {
                u[(i, k)] = w[(i, k)] / s;
            }
        }
    }
    (u, sigma, v)
}

/// Compact SVD in double precision. Singular values at or below
/// `rank_tol * sigma_max` are treated as zero.
pub fn compact_svd(a: &DenseMatrix<f64>, rank_tol: f64) -> CompactSvd {
    let (u, sigma, v) = if a.rows() >= a.cols() {
        jacobi_svd_tall(a)
    } else {
        let (ut, s, vt) = jacobi_svd_tall(&a.transpose());
        (vt, s, ut)
    };
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let threshold = rank_tol * sigma_max;
    let kept: Vec<usize> = (0..sigma.len())
        .filter(|&i| sigma_max > 0.0 && sigma[i] > threshold)
        .collect();
    let rank = kept.len();
    let mut u1 = DenseMatrix::zeros(a.rows(), rank);
    let mut v1 = DenseMatrix::zeros(a.cols(), rank);
    let mut sig = Vec::with_capacity(rank);
    for (out, &i) in kept.iter().enumerate() {
        sig.push(sigma[i]);
        for r in 0..a.rows() {
            u1[(r, out)] = u[(r, i)];
        }
        for c in 0..a.cols() {
            v1[(c, out)] = v[(c, i)];
        }
    }
    CompactSvd {
        u1,
        sigma: sig,
        v1,
        rank,
    }
}

/// Numerical rank via SVD with a relative tolerance.
pub fn svd_rank(a: &DenseMatrix<f64>, rank_tol: f64) -> usize {
    compact_svd(a, rank_tol).rank
}

/// Moore-Penrose pseudo-inverse `a^+ = v1 * diag(1/sigma) * u1^T`.
///
/// Computed in double precision and truncated back to the caller's scalar
/// type. Satisfies the four Moore-Penrose identities to tolerance.
pub fn svd_pseudo_inverse<S: Scalar>(
    a: &DenseMatrix<S>,
    rank_tol: f64,
) -> Result<DenseMatrix<S>, LinalgError> {
    if !a.is_finite() {
        return Err(LinalgError::NonFinite {
            op: "svd_pseudo_inverse",
        });
    }
    let svd = compact_svd(&a.to_f64(), rank_tol);
    let mut pinv = DenseMatrix::<f64>::zeros(a.cols(), a.rows());
    for k in 0..svd.rank {
        let inv_s = 1.0 / svd.sigma[k];
        for i in 0..a.cols() {
            let vik = svd.v1[(i, k)] * inv_s;
            if vik == 0.0 {
                continue;
            }
            for j in 0..a.rows() {
                pinv[(i, j)] += vik * svd.u1[(j, k)];
            }
        }
    }
    Ok(pinv.cast())
}

/// All eigenvalues of the symmetrized input by cyclic Jacobi rotations,
/// in double precision; unordered.
pub fn symmetric_eigenvalues<S: Scalar>(h: &DenseMatrix<S>) -> Result<Vec<f64>, LinalgError> {
    if !h.is_finite() {
        return Err(LinalgError::NonFinite {
            op: "symmetric_eigenvalues",
        });
    }
    if h.rows() != h.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "symmetric_eigenvalues",
            detail: format!("{}x{}", h.rows(), h.cols()),
        });
    }
    let n = h.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut a = h.to_f64();
    a.symmetrize();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale;
    for _ in 0..64 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                rotated = true;
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    Ok((0..n).map(|i| a[(i, i)]).collect())
}

/// Smallest real eigenvalue of the symmetrized input, always evaluated in
/// double precision.
pub fn min_eigenvalue<S: Scalar>(h: &DenseMatrix<S>) -> Result<f64, LinalgError> {
    let eigs = symmetric_eigenvalues(h)?;
    Ok(eigs.into_iter().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-12;

    #[test]
    fn pseudo_inverse_of_invertible_matrix_is_inverse() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let p = svd_pseudo_inverse(&a, TOL).unwrap();
        let eye = a.mul(&p);
        assert!(eye.sub(&DenseMatrix::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn pseudo_inverse_of_zero_matrix_is_zero_transposed() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let p = svd_pseudo_inverse(&a, TOL).unwrap();
        assert_eq!((p.rows(), p.cols()), (3, 2));
        assert_eq!(p.max_abs(), 0.0);
    }

    #[test]
    fn projector_case() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let p = svd_pseudo_inverse(&a, TOL).unwrap();
        assert!(p.sub(&a).max_abs() < 1e-14);
        let apa = a.mul(&p).mul(&a);
        assert!(apa.sub(&a).max_abs() < 1e-14);
    }

    #[test]
    fn reconstruction_from_compact_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..200 {
            let m = rng.random_range(1..=12usize);
            let n = rng.random_range(1..=12usize);
            let a = DenseMatrix::<f64>::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
            let svd = compact_svd(&a, 0.0);
            // u1 diag(sigma) v1^T == a
            let mut back = DenseMatrix::<f64>::zeros(m, n);
            for k in 0..svd.rank {
                for i in 0..m {
                    for j in 0..n {
                        back[(i, j)] += svd.sigma[k] * svd.u1[(i, k)] * svd.v1[(j, k)];
                    }
                }
            }
            let err = back.sub(&a).frob_norm();
            assert!(
                err <= 1e2 * f64::EPSILON * a.frob_norm().max(1e-30),
                "trial {trial}: {err:e}"
            );
            // Orthonormal factors.
            let utu = svd.u1.gram();
            assert!(utu.sub(&DenseMatrix::identity(svd.rank)).max_abs() < 1e-13);
            let vtv = svd.v1.gram();
            assert!(vtv.sub(&DenseMatrix::identity(svd.rank)).max_abs() < 1e-13);
        }
    }

    #[test]
    fn moore_penrose_identities_hold_over_random_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200 {
            let m = rng.random_range(1..=10usize);
            let n = rng.random_range(1..=10usize);
            let rank = rng.random_range(0..=m.min(n));
            let a = if rank == 0 {
                DenseMatrix::<f64>::zeros(m, n)
            } else {
                let l = DenseMatrix::<f64>::from_fn(m, rank, |_, _| rng.random_range(-1.0..1.0));
                let r = DenseMatrix::<f64>::from_fn(rank, n, |_, _| rng.random_range(-1.0..1.0));
                l.mul(&r)
            };
            let p = svd_pseudo_inverse(&a, 1e-10).unwrap();
            let tol = 100.0 * f64::EPSILON * (a.frob_norm() + 1.0) * (p.frob_norm() + 1.0);
            assert!(a.mul(&p).mul(&a).sub(&a).max_abs() < tol, "trial {trial} A A+ A");
            assert!(p.mul(&a).mul(&p).sub(&p).max_abs() < tol, "trial {trial} A+ A A+");
            // Symmetry of the projectors.
            let ap = a.mul(&p);
            assert!(ap.sub(&ap.transpose()).max_abs() < tol, "trial {trial} (A A+)^T");
            let pa = p.mul(&a);
            assert!(pa.sub(&pa.transpose()).max_abs() < tol, "trial {trial} (A+ A)^T");
        }
    }

    #[test]
    fn min_eigenvalue_basics() {
        assert_eq!(min_eigenvalue(&DenseMatrix::<f64>::identity(3)).unwrap(), 1.0);
        let d = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -2.0]]);
        assert_eq!(min_eigenvalue(&d).unwrap(), -2.0);
    }

    #[test]
    fn eigenvalues_match_characteristic_roots_on_2x2() {
        let h = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut eigs = symmetric_eigenvalues(&h).unwrap();
        eigs.sort_by(f64::total_cmp);
        assert!((eigs[0] - 1.0).abs() < 1e-14);
        assert!((eigs[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn gram_matrices_are_psd_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let m = rng.random_range(1..=12usize);
            let n = rng.random_range(1..=8usize);
            let r = DenseMatrix::<f64>::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
            let g = r.gram();
            let min = min_eigenvalue(&g).unwrap();
            assert!(min >= -10.0 * f64::EPSILON * g.frob_norm());
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let a = DenseMatrix::from_rows(&[vec![f64::INFINITY]]);
        assert!(svd_pseudo_inverse(&a, TOL).is_err());
        assert!(min_eigenvalue(&a).is_err());
    }
}
