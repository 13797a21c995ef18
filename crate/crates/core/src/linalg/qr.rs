use super::mat::{vec_dot, DenseMatrix, Scalar};
use super::LinalgError;

/// One Householder reflector `H = I - tau * v v^T`, acting on rows
/// `row..row+v.len()` of whatever it is applied to.
#[derive(Clone, Debug)]
pub struct Reflector<S> {
    pub row: usize,
    pub v: Vec<S>,
    pub tau: S,
}

impl<S: Scalar> Reflector<S> {
    fn apply_to_slice(&self, x: &mut [S]) {
        let seg = &mut x[self.row..self.row + self.v.len()];
        let f = self.tau * vec_dot(&self.v, seg);
        for (xi, vi) in seg.iter_mut().zip(&self.v) {
            *xi -= f * *vi;
        }
    }

    fn apply_to_column(&self, m: &mut DenseMatrix<S>, col: usize) {
        let mut dot = S::zero();
        for (k, vi) in self.v.iter().enumerate() {
            dot += *vi * m[(self.row + k, col)];
        }
        let f = self.tau * dot;
        for (k, vi) in self.v.iter().enumerate() {
            m[(self.row + k, col)] -= f * *vi;
        }
    }
}

/// Outcome of a Householder elimination sweep.
pub struct SweepResult<S> {
    pub reflectors: Vec<Reflector<S>>,
    /// Columns that received a pivot, in elimination order.
    pub pivot_cols: Vec<usize>,
}

/// Eliminates the given columns of `work` in place with Householder
/// reflections, applying every reflection to the full width of `work`.
///
/// With `flat = true` the pivot row only advances when a pivot is found, so a
/// dependent column never leaves a zero on the diagonal staircase; with
/// `flat = false` the pivot row is tied to the column position as in the
/// textbook algorithm. A column whose remaining norm is at most `zero_tol` is
/// flushed to exact zeros below the pivot row and gets no pivot. Reflectors
/// are chosen so accepted pivots come out non-negative.
pub fn eliminate_columns<S: Scalar>(
    work: &mut DenseMatrix<S>,
    cols: &[usize],
    start_row: usize,
    zero_tol: S,
    flat: bool,
) -> SweepResult<S> {
    let m = work.rows();
    let width = work.cols();
    let mut reflectors = Vec::new();
    let mut pivot_cols = Vec::new();
    let mut pivot_row = start_row;

    for (pos, &col) in cols.iter().enumerate() {
        let row = if flat { pivot_row } else { start_row + pos };
        if row >= m {
            break;
        }

        let x0 = work[(row, col)];
        let mut tail_ss = S::zero();
        for i in (row + 1)..m {
            let v = work[(i, col)];
            tail_ss += v * v;
        }
        let norm = (x0 * x0 + tail_ss).sqrt();

        if norm <= zero_tol {
            // Dependent column: flush the residue so rank is readable.
            for i in row..m {
                work[(i, col)] = S::zero();
            }
            continue;
        }

        if tail_ss == S::zero() && x0 >= S::zero() {
            // Already in eliminated form; no reflection needed.
            pivot_cols.push(col);
            pivot_row = row + 1;
            continue;
        }

        // Stable Householder vector with a non-negative resulting pivot:
        // for x0 >= 0 the leading entry is computed without cancellation.
        let v0 = if x0 >= S::zero() {
            -tail_ss / (x0 + norm)
        } else {
            x0 - norm
        };
        let mut v = Vec::with_capacity(m - row);
        v.push(v0);
        for i in (row + 1)..m {
            v.push(work[(i, col)]);
        }
        let tau = S::of_f64(2.0) / (v0 * v0 + tail_ss);
        let refl = Reflector { row, v, tau };

        for j in 0..width {
            if j == col {
                continue;
            }
            refl.apply_to_column(work, j);
        }
        work[(row, col)] = norm;
        for i in (row + 1)..m {
            work[(i, col)] = S::zero();
        }

        reflectors.push(refl);
        pivot_cols.push(col);
        pivot_row = row + 1;
    }

    SweepResult {
        reflectors,
        pivot_cols,
    }
}

/// Result of a Householder QR factorization (standard or flat).
///
/// `r_factor` holds the first `min(rows, cols)` rows of `R`; trailing zero
/// rows are kept so the staircase structure stays visible, and `total_rank`
/// counts the nonzero rows. The reflectors suffice to apply `Q^T` (or `Q`)
/// to any vector or matrix with the original row count; `Q` itself is never
/// formed.
pub struct FlatQrResult<S> {
    pub r_factor: DenseMatrix<S>,
    pub reflectors: Vec<Reflector<S>>,
    /// Number of nonzero rows of `r_factor`. For `flat_qr` this equals the
    /// numerical rank of the input; for `householder_qr` on rank-deficient
    /// input it can exceed the rank (dependent columns leave row residue).
    pub total_rank: usize,
    /// Rank of the leading column block (the `n_lead` columns handed to
    /// `flat_qr`); zero for `householder_qr`.
    pub lead_rank: usize,
    pub zero_tolerance_used: S,
    rows_in: usize,
}

impl<S: Scalar> FlatQrResult<S> {
    pub fn rows_in(&self) -> usize {
        self.rows_in
    }

    /// Applies `Q^T` to a vector of the original row count.
    pub fn apply_qt_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(v.len(), self.rows_in, "apply_qt_vec length mismatch");
        let mut out = v.to_vec();
        for r in &self.reflectors {
            r.apply_to_slice(&mut out);
        }
        out
    }

    /// Applies `Q` (reflectors in reverse) to a vector.
    pub fn apply_q_vec(&self, v: &[S]) -> Vec<S> {
        assert_eq!(v.len(), self.rows_in, "apply_q_vec length mismatch");
        let mut out = v.to_vec();
        for r in self.reflectors.iter().rev() {
            r.apply_to_slice(&mut out);
        }
        out
    }

    /// Applies `Q^T` to every column of `m`.
    pub fn apply_qt(&self, m: &DenseMatrix<S>) -> DenseMatrix<S> {
        assert_eq!(m.rows(), self.rows_in, "apply_qt row mismatch");
        let mut out = m.clone();
        for r in &self.reflectors {
            for j in 0..out.cols() {
                r.apply_to_column(&mut out, j);
            }
        }
        out
    }
}

fn check_finite<S: Scalar>(a: &DenseMatrix<S>, op: &'static str) -> Result<(), LinalgError> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(LinalgError::NonFinite { op })
    }
}

fn finish_qr<S: Scalar>(
    work: DenseMatrix<S>,
    sweep: SweepResult<S>,
    n_lead: usize,
    zero_tol: S,
    count_nonzero_rows: bool,
) -> FlatQrResult<S> {
    let m = work.rows();
    let n = work.cols();
    let keep = m.min(n);
    let r_factor = work.block(0, 0, keep, n);
    let total_rank = if count_nonzero_rows {
        (0..keep)
            .filter(|&i| {
                r_factor
                    .row(i)
                    .iter()
                    .fold(S::zero(), |acc, v| acc + *v * *v)
                    .sqrt()
                    > zero_tol
            })
            .count()
    } else {
        sweep.pivot_cols.len()
    };
    let lead_rank = sweep.pivot_cols.iter().filter(|&&c| c < n_lead).count();
    FlatQrResult {
        r_factor,
        reflectors: sweep.reflectors,
        total_rank,
        lead_rank,
        zero_tolerance_used: zero_tol,
        rows_in: m,
    }
}

/// Standard column-by-column Householder QR.
///
/// For full-column-rank input the result is identical to [`flat_qr`]; on
/// dependent columns the pivot row keeps advancing, so `R` can exhibit zero
/// diagonal entries with residue rows below them.
pub fn householder_qr<S: Scalar>(a: &DenseMatrix<S>) -> Result<FlatQrResult<S>, LinalgError> {
    check_finite(a, "householder_qr")?;
    assert!(a.rows() >= 1 && a.cols() >= 1, "empty matrix");
    let zero_tol = super::default_zero_tol(a);
    let mut work = a.clone();
    let cols: Vec<usize> = (0..a.cols()).collect();
    let sweep = eliminate_columns(&mut work, &cols, 0, zero_tol, false);
    Ok(finish_qr(work, sweep, 0, zero_tol, true))
}

/// Rank-revealing, pivoting-free Householder QR whose `R` never steps down
/// more than one row per column: the rank is the number of nonzero rows, and
/// `lead_rank` reports the rank of the leading `n_lead` columns.
pub fn flat_qr<S: Scalar>(
    a: &DenseMatrix<S>,
    n_lead: usize,
    zero_tol: S,
) -> Result<FlatQrResult<S>, LinalgError> {
    check_finite(a, "flat_qr")?;
    if zero_tol < S::zero() {
        return Err(LinalgError::NegativeTolerance {
            op: "flat_qr",
            tol: zero_tol.as_f64(),
        });
    }
    assert!(n_lead <= a.cols(), "n_lead exceeds column count");
    let mut work = a.clone();
    let cols: Vec<usize> = (0..a.cols()).collect();
    let sweep = eliminate_columns(&mut work, &cols, 0, zero_tol, true);
    Ok(finish_qr(work, sweep, n_lead, zero_tol, false))
}
