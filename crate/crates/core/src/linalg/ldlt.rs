use super::mat::{DenseMatrix, Scalar};
use super::LinalgError;

/// Square root of a symmetric PSD matrix obtained from an LDL^T
/// factorization: `r_factor = D^{1/2} L^T` with zero-pivot rows dropped.
pub struct LdltSqrt<S> {
    pub r_factor: DenseMatrix<S>,
    /// Pivots below `-tolerance` that were clamped to zero. A nonzero count
    /// means the input was numerically indefinite.
    pub clamped_pivots: usize,
}

fn pivot_tolerance<S: Scalar>(h: &DenseMatrix<S>) -> S {
    S::of_f64(256.0) * S::eps() * h.max_abs()
}

fn check_symmetric<S: Scalar>(h: &DenseMatrix<S>, op: &'static str) -> Result<(), LinalgError> {
    if h.rows() != h.cols() {
        return Err(LinalgError::DimensionMismatch {
            op,
            detail: format!("{}x{} is not square", h.rows(), h.cols()),
        });
    }
    if !h.is_finite() {
        return Err(LinalgError::NonFinite { op });
    }
    let mut max_dev = S::zero();
    for i in 0..h.rows() {
        for j in (i + 1)..h.cols() {
            max_dev = max_dev.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    let tol = pivot_tolerance(h);
    if max_dev > tol {
        return Err(LinalgError::Asymmetric {
            op,
            max_dev: max_dev.as_f64(),
        });
    }
    Ok(())
}

/// LDL^T-based matrix square root of a symmetric PSD input.
///
/// Pivots in `[-tol, tol]` are treated as exact zeros and their rows dropped;
/// pivots below `-tol` are additionally counted as clamped so callers can
/// surface a definiteness warning.
pub fn ldlt_sqrt<S: Scalar>(h: &DenseMatrix<S>) -> Result<LdltSqrt<S>, LinalgError> {
    check_symmetric(h, "ldlt_sqrt")?;
    let n = h.rows();
    let tol = pivot_tolerance(h);
    let mut l = DenseMatrix::<S>::identity(n);
    let mut d = vec![S::zero(); n];
    let mut clamped = 0usize;

    for j in 0..n {
        let mut dj = h[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if dj <= tol {
            if dj < -tol {
                clamped += 1;
            }
            d[j] = S::zero();
            continue;
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = h[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = v / dj;
        }
    }

    let kept: Vec<usize> = (0..n).filter(|&j| d[j] > S::zero()).collect();
    let mut r = DenseMatrix::zeros(kept.len(), n);
    for (out_row, &j) in kept.iter().enumerate() {
        let s = d[j].sqrt();
        for i in j..n {
            r[(out_row, i)] = s * l[(i, j)];
        }
    }
    Ok(LdltSqrt {
        r_factor: r,
        clamped_pivots: clamped,
    })
}

/// Symmetric-indefinite LDL^T solve of `h * x = rhs` (one column).
///
/// No pivoting; fails when a pivot magnitude drops to the tolerance, which
/// callers treat as "singular" (reduced-system solves then raise damping,
/// marginalization falls back to the pseudo-inverse).
pub fn ldlt_solve<S: Scalar>(h: &DenseMatrix<S>, rhs: &[S]) -> Result<Vec<S>, LinalgError> {
    let m = DenseMatrix::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    let x = ldlt_solve_mat(h, &m)?;
    Ok((0..rhs.len()).map(|i| x[(i, 0)]).collect())
}

/// Multi-column variant of [`ldlt_solve`].
pub fn ldlt_solve_mat<S: Scalar>(
    h: &DenseMatrix<S>,
    rhs: &DenseMatrix<S>,
) -> Result<DenseMatrix<S>, LinalgError> {
    let op = "ldlt_solve";
    let n = h.rows();
    if h.cols() != n || rhs.rows() != n {
        return Err(LinalgError::DimensionMismatch {
            op,
            detail: format!("h {}x{}, rhs {}x{}", h.rows(), h.cols(), rhs.rows(), rhs.cols()),
        });
    }
    if !h.is_finite() || !rhs.is_finite() {
        return Err(LinalgError::NonFinite { op });
    }
    let tol = pivot_tolerance(h).max(S::of_f64(f64::MIN_POSITIVE));
    let mut l = DenseMatrix::<S>::identity(n);
    let mut d = vec![S::zero(); n];
    for j in 0..n {
        let mut dj = h[(j, j)];
        for k in 0..j {
            dj -= l[(j, k)] * l[(j, k)] * d[k];
        }
        if dj.abs() <= tol {
            return Err(LinalgError::SingularPivot {
                op,
                index: j,
                value: dj.as_f64(),
            });
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = h[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)] * d[k];
            }
            l[(i, j)] = v / dj;
        }
    }

    let mut x = rhs.clone();
    for c in 0..x.cols() {
        // Forward: L y = rhs
        for i in 0..n {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v;
        }
        // Diagonal and backward: L^T z = D^{-1} y
        for i in 0..n {
            x[(i, c)] /= d[i];
        }
        for i in (0..n).rev() {
            let mut v = x[(i, c)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = v;
        }
    }
    Ok(x)
}
