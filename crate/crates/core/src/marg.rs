//! Marginalization priors and frame-variable marginalization.
//!
//! The prior summarizing removed variables is stored either as a quadratic
//! form `(H_m, b_m)` or in square-root form `(J_m, r_m)`; both are defined
//! relative to a frozen linearization point per remaining frame. Frame
//! elimination comes in two equivalent flavours: the conventional Schur
//! complement on the assembled normal equations (with a Moore-Penrose
//! fallback for rank-deficient blocks) and a direct update of the square
//! root via the flat QR factorization, which never forms `H` and reads the
//! prior rank off the factor's row count.

use crate::linalg::{
    flat_qr, ldlt_solve, ldlt_solve_mat, ldlt_sqrt, svd_pseudo_inverse, DenseMatrix, LinalgError,
    Scalar,
};
use crate::problem::{FrameId, FrameLin};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MargError {
    #[error("linear algebra: {0}")]
    Linalg(#[from] LinalgError),
    #[error("marginalized block is singular; retry with the pseudo-inverse mode")]
    SingularMargBlock,
    #[error("prior is not in {expected} form")]
    WrongForm { expected: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("missing state for frame {0:?}")]
    MissingState(FrameId),
}

/// Storage form of the marginalization energy.
#[derive(Clone, Debug)]
pub enum PriorForm<S: Scalar> {
    Squared { h: DenseMatrix<S>, b: Vec<S> },
    Sqrt { j: DenseMatrix<S>, r: Vec<S> },
}

/// Marginalization prior over an ordered set of frame variables.
#[derive(Clone, Debug)]
pub struct MarginalizationPrior<S: Scalar> {
    pub form: PriorForm<S>,
    /// Ordered frame ids with per-frame block sizes; column layout of the
    /// stored matrices.
    pub variable_index: Vec<(FrameId, usize)>,
    /// Frozen expansion point per frame.
    pub lin_point: BTreeMap<FrameId, FrameLin<S>>,
}

impl<S: Scalar> MarginalizationPrior<S> {
    pub fn empty() -> Self {
        Self {
            form: PriorForm::Sqrt {
                j: DenseMatrix::zeros(0, 0),
                r: Vec::new(),
            },
            variable_index: Vec::new(),
            lin_point: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.variable_index.iter().map(|(_, d)| d).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.variable_index.is_empty()
    }

    /// Rows of the square-root factor; `None` for the squared form.
    pub fn sqrt_rows(&self) -> Option<usize> {
        match &self.form {
            PriorForm::Sqrt { j, .. } => Some(j.rows()),
            PriorForm::Squared { .. } => None,
        }
    }

    /// `(H_m, b_m)` view in f64 for diagnostics; forms the Gram matrix for
    /// the square-root form (the only place the sqrt pipeline squares).
    pub fn quadratic_f64(&self) -> (DenseMatrix<f64>, Vec<f64>) {
        match &self.form {
            PriorForm::Squared { h, b } => {
                (h.to_f64(), b.iter().map(|v| v.as_f64()).collect())
            }
            PriorForm::Sqrt { j, r } => {
                let j64 = j.to_f64();
                let r64: Vec<f64> = r.iter().map(|v| v.as_f64()).collect();
                (j64.gram(), j64.tr_mul_vec(&r64))
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> MarginalizationPrior<T> {
        let form = match &self.form {
            PriorForm::Squared { h, b } => PriorForm::Squared {
                h: h.cast(),
                b: b.iter().map(|v| T::of_f64(v.as_f64())).collect(),
            },
            PriorForm::Sqrt { j, r } => PriorForm::Sqrt {
                j: j.cast(),
                r: r.iter().map(|v| T::of_f64(v.as_f64())).collect(),
            },
        };
        MarginalizationPrior {
            form,
            variable_index: self.variable_index.clone(),
            lin_point: self
                .lin_point
                .iter()
                .map(|(k, v)| (*k, v.cast()))
                .collect(),
        }
    }
}

/// Stacked chart coordinates of `states` relative to the prior's expansion
/// point, in variable-index order.
pub fn prior_delta<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    states: &BTreeMap<FrameId, FrameLin<S>>,
) -> Result<Vec<S>, MargError> {
    let mut delta = Vec::with_capacity(prior.dim());
    for (id, dim) in &prior.variable_index {
        let lin = prior.lin_point.get(id).ok_or(MargError::MissingState(*id))?;
        let cur = states.get(id).ok_or(MargError::MissingState(*id))?;
        delta.extend(lin.local_coordinates(cur, *dim));
    }
    Ok(delta)
}

/// Prior energy at the given states.
///
/// Squared form: `0.5 d^T H_m d + b_m^T d`; square-root form:
/// `0.5 || r_m + J_m d ||^2`. For a converted pair the two differ by the
/// constant `0.5 || r_m ||^2`.
pub fn prior_energy<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    states: &BTreeMap<FrameId, FrameLin<S>>,
) -> Result<S, MargError> {
    if prior.is_empty() {
        return Ok(S::zero());
    }
    let delta = prior_delta(prior, states)?;
    let half = S::of_f64(0.5);
    match &prior.form {
        PriorForm::Squared { h, b } => {
            let hd = h.mul_vec(&delta);
            let quad = delta
                .iter()
                .zip(&hd)
                .fold(S::zero(), |acc, (d, hd)| acc + *d * *hd);
            let lin = delta
                .iter()
                .zip(b)
                .fold(S::zero(), |acc, (d, b)| acc + *d * *b);
            Ok(half * quad + lin)
        }
        PriorForm::Sqrt { j, r } => {
            let jd = j.mul_vec(&delta);
            let e = r
                .iter()
                .zip(&jd)
                .fold(S::zero(), |acc, (r, jd)| acc + (*r + *jd) * (*r + *jd));
            Ok(half * e)
        }
    }
}

/// Shifts the expansion point by `delta`: the energy function is unchanged
/// up to an additive constant. Square-root form updates `r_m += J_m delta`,
/// squared form updates `b_m += H_m delta`; the stored linearization point
/// is retracted by `delta`.
pub fn shift_prior<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    delta: &[S],
) -> Result<MarginalizationPrior<S>, MargError> {
    if delta.len() != prior.dim() {
        return Err(MargError::Dimension(format!(
            "shift delta has {} entries, prior dimension is {}",
            delta.len(),
            prior.dim()
        )));
    }
    let form = match &prior.form {
        PriorForm::Sqrt { j, r } => {
            let jd = j.mul_vec(delta);
            PriorForm::Sqrt {
                j: j.clone(),
                r: r.iter().zip(&jd).map(|(r, jd)| *r + *jd).collect(),
            }
        }
        PriorForm::Squared { h, b } => {
            let hd = h.mul_vec(delta);
            PriorForm::Squared {
                h: h.clone(),
                b: b.iter().zip(&hd).map(|(b, hd)| *b + *hd).collect(),
            }
        }
    };
    let mut lin_point = prior.lin_point.clone();
    let mut offset = 0;
    for (id, dim) in &prior.variable_index {
        let lin = lin_point.get_mut(id).ok_or(MargError::MissingState(*id))?;
        *lin = lin.retract(&delta[offset..offset + dim]);
        offset += dim;
    }
    Ok(MarginalizationPrior {
        form,
        variable_index: prior.variable_index.clone(),
        lin_point,
    })
}

/// One frame variable retained by a marginalization event.
#[derive(Clone, Debug)]
pub struct KeepVar<S: Scalar> {
    pub id: FrameId,
    pub dim: usize,
    /// Current state estimate; initial expansion point of the new prior.
    pub state: FrameLin<S>,
}

/// Input of a frame marginalization event: stacked residual rows touching
/// the marginalized variables (landmarks already eliminated by nullspace
/// projection), with the marginalized frame columns leading.
#[derive(Clone, Debug)]
pub struct MarginalizationInput<S: Scalar> {
    pub jac: DenseMatrix<S>,
    pub res: Vec<S>,
    pub marg_vars: Vec<(FrameId, usize)>,
    pub keep_vars: Vec<KeepVar<S>>,
    /// Squared prior entering as a Hessian/gradient summand over the
    /// `[marg | keep]` column layout (conventional pipeline only; the
    /// square-root pipeline passes prior rows inside `jac`/`res`).
    pub hessian_summand: Option<(DenseMatrix<S>, Vec<S>)>,
    pub zero_tol: S,
}

impl<S: Scalar> MarginalizationInput<S> {
    pub fn n_marg(&self) -> usize {
        self.marg_vars.iter().map(|(_, d)| d).sum()
    }

    pub fn n_keep(&self) -> usize {
        self.keep_vars.iter().map(|k| k.dim).sum()
    }

    fn validate(&self) -> Result<(), MargError> {
        let n = self.n_marg() + self.n_keep();
        if self.jac.cols() != n {
            return Err(MargError::Dimension(format!(
                "jacobian has {} columns, variables span {}",
                self.jac.cols(),
                n
            )));
        }
        if self.jac.rows() != self.res.len() {
            return Err(MargError::Dimension(format!(
                "jacobian has {} rows, residual has {}",
                self.jac.rows(),
                self.res.len()
            )));
        }
        if let Some((h, b)) = &self.hessian_summand {
            if h.rows() != n || h.cols() != n || b.len() != n {
                return Err(MargError::Dimension(format!(
                    "hessian summand {}x{} / {} does not span {}",
                    h.rows(),
                    h.cols(),
                    b.len(),
                    n
                )));
            }
        }
        Ok(())
    }

    fn keep_index(&self) -> Vec<(FrameId, usize)> {
        self.keep_vars.iter().map(|k| (k.id, k.dim)).collect()
    }

    fn keep_states(&self) -> BTreeMap<FrameId, FrameLin<S>> {
        self.keep_vars
            .iter()
            .map(|k| (k.id, k.state.clone()))
            .collect()
    }
}

/// Schur-complement marginalization on the normal equations.
///
/// Builds `H = J^T J (+ summand)`, `b = J^T r (+ summand)` and eliminates
/// the leading block: `H~ = H_kk - H_km H_mm^{-1} H_mk` and likewise for
/// `b`. With `use_pseudo` the inverse is the Moore-Penrose inverse, which
/// extends the formula to rank-deficient marginalized blocks. The returned
/// prior is expanded at the supplied current states; the caller shifts it
/// to the frozen linearization point afterwards.
pub fn marginalize_sc<S: Scalar>(
    input: &MarginalizationInput<S>,
    use_pseudo: bool,
) -> Result<MarginalizationPrior<S>, MargError> {
    input.validate()?;
    let n_m = input.n_marg();
    let n_k = input.n_keep();

    let mut h = input.jac.gram();
    let mut b = input.jac.tr_mul_vec(&input.res);
    if let Some((hs, bs)) = &input.hessian_summand {
        h = h.add(hs);
        for (bi, si) in b.iter_mut().zip(bs) {
            *bi += *si;
        }
    }

    let h_mm = h.block(0, 0, n_m, n_m);
    let h_mk = h.block(0, n_m, n_m, n_k);
    let h_kk = h.block(n_m, n_m, n_k, n_k);
    let b_m: Vec<S> = b[..n_m].to_vec();
    let b_k: Vec<S> = b[n_m..].to_vec();

    // X = H_mm^{-1} [H_mk | b_m]
    let mut rhs = DenseMatrix::zeros(n_m, n_k + 1);
    rhs.set_block(0, 0, &h_mk);
    for i in 0..n_m {
        rhs[(i, n_k)] = b_m[i];
    }
    let x = if use_pseudo {
        let pinv = svd_pseudo_inverse(&h_mm, 1e-10)?;
        pinv.mul(&rhs)
    } else {
        match ldlt_solve_mat(&h_mm, &rhs) {
            Ok(x) => x,
            Err(LinalgError::SingularPivot { .. }) => return Err(MargError::SingularMargBlock),
            Err(e) => return Err(e.into()),
        }
    };

    let x_h = x.block(0, 0, n_m, n_k);
    let h_km = h_mk.transpose();
    let mut h_red = h_kk.sub(&h_km.mul(&x_h));
    h_red.symmetrize();
    let x_b: Vec<S> = (0..n_m).map(|i| x[(i, n_k)]).collect();
    let correction = h_km.mul_vec(&x_b);
    let b_red: Vec<S> = b_k
        .iter()
        .zip(&correction)
        .map(|(b, c)| *b - *c)
        .collect();

    Ok(MarginalizationPrior {
        form: PriorForm::Squared { h: h_red, b: b_red },
        variable_index: input.keep_index(),
        lin_point: input.keep_states(),
    })
}

/// Square-root marginalization via the flat QR factorization.
///
/// Factorizes `[J_marg J_keep]`, applies `Q^T` to the residual, then drops
/// the leading `rank(J_marg)` rows, the marginalized columns, and all zero
/// rows. The remaining factor is the new `J_m` with `rank(H~)` rows; the
/// prior is expanded at the supplied current states like [`marginalize_sc`].
pub fn marginalize_qr<S: Scalar>(
    input: &MarginalizationInput<S>,
) -> Result<MarginalizationPrior<S>, MargError> {
    input.validate()?;
    if input.hessian_summand.is_some() {
        return Err(MargError::WrongForm { expected: "sqrt" });
    }
    let n_m = input.n_marg();
    let n_k = input.n_keep();

    let qr = flat_qr(&input.jac, n_m, input.zero_tol)?;
    let r_rotated = qr.apply_qt_vec(&input.res);
    let lead = qr.lead_rank;
    let total = qr.total_rank;

    let j_m = qr.r_factor.block(lead, n_m, total - lead, n_k);
    let r_m = r_rotated[lead..total].to_vec();

    Ok(MarginalizationPrior {
        form: PriorForm::Sqrt { j: j_m, r: r_m },
        variable_index: input.keep_index(),
        lin_point: input.keep_states(),
    })
}

/// Re-factorizes a squared prior into square-root form via the LDLT matrix
/// square root; `r_m` solves `J_m^T r_m = b_m` in the least-squares sense.
/// Returns the number of clamped (numerically negative) pivots.
pub fn sqrt_from_squared<S: Scalar>(
    prior: &MarginalizationPrior<S>,
) -> Result<(MarginalizationPrior<S>, usize), MargError> {
    let PriorForm::Squared { h, b } = &prior.form else {
        return Err(MargError::WrongForm { expected: "squared" });
    };
    let ldlt = ldlt_sqrt(h)?;
    let j = ldlt.r_factor;
    let r = if j.rows() == 0 {
        Vec::new()
    } else {
        // (J J^T) r = J b; J has full row rank by construction.
        let jjt = j.transpose().gram();
        let jb = j.mul_vec(b);
        ldlt_solve(&jjt, &jb)?
    };
    Ok((
        MarginalizationPrior {
            form: PriorForm::Sqrt { j, r },
            variable_index: prior.variable_index.clone(),
            lin_point: prior.lin_point.clone(),
        },
        ldlt.clamped_pivots,
    ))
}

/// Stacks new residual rows over the retained-plus-free variables with the
/// square-root prior into one square root of the reduced normal equations:
/// `[[J_new], [J_m 0]]` and `[r_new, r_m]`. The prior's variables occupy
/// the leading columns of the stacked layout.
pub fn augmented_sqrt_system<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    new_jac: &DenseMatrix<S>,
    new_res: &[S],
    total_cols: usize,
) -> Result<(DenseMatrix<S>, Vec<S>), MargError> {
    let PriorForm::Sqrt { j, r } = &prior.form else {
        return Err(MargError::WrongForm { expected: "sqrt" });
    };
    if new_jac.cols() != total_cols || prior.dim() > total_cols {
        return Err(MargError::Dimension(format!(
            "stack of {} columns cannot hold jacobian with {} and prior with {}",
            total_cols,
            new_jac.cols(),
            prior.dim()
        )));
    }
    if new_jac.rows() != new_res.len() {
        return Err(MargError::Dimension(format!(
            "jacobian rows {} vs residual rows {}",
            new_jac.rows(),
            new_res.len()
        )));
    }
    let mut padded = DenseMatrix::zeros(j.rows(), total_cols);
    padded.set_block(0, 0, j);
    let stacked = new_jac.vstack(&padded);
    let mut res = new_res.to_vec();
    res.extend(r.iter().copied());
    Ok((stacked, res))
}
