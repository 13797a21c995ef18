//! Precision-generic dense linear algebra.
//!
//! Everything in here operates on [`DenseMatrix`], a plain row-major matrix
//! whose scalar type is one of exactly two instantiations (`f32`, `f64`).
//! The QR and LDLT kernels are hand-written because the marginalization
//! pipeline needs full control over reflector order, rank decisions and
//! in-place application; the SVD and eigenvalue routines are thin wrappers
//! over `nalgebra` evaluated in double precision and serve as the independent
//! route for rank and definiteness checks.

mod ldlt;
mod mat;
mod qr;
mod svd;

pub use ldlt::{ldlt_solve, ldlt_solve_mat, ldlt_sqrt, LdltSqrt};
pub use mat::{DenseMatrix, Scalar};
pub use mat::{vec_dot, vec_norm};
pub use qr::{eliminate_columns, flat_qr, householder_qr, FlatQrResult, Reflector, SweepResult};
pub use svd::{
    compact_svd, min_eigenvalue, svd_pseudo_inverse, svd_rank, symmetric_eigenvalues, CompactSvd,
};

use thiserror::Error;

/// Errors reported by the dense kernels.
#[derive(Debug, Clone, Error)]
pub enum LinalgError {
    #[error("{op}: input contains non-finite entries")]
    NonFinite { op: &'static str },
    #[error("{op}: negative tolerance {tol}")]
    NegativeTolerance { op: &'static str, tol: f64 },
    #[error("{op}: matrix is not symmetric (max deviation {max_dev:e})")]
    Asymmetric { op: &'static str, max_dev: f64 },
    #[error("{op}: dimension mismatch ({detail})")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("{op}: pivot {index} is numerically singular ({value:e})")]
    SingularPivot {
        op: &'static str,
        index: usize,
        value: f64,
    },
}

/// Default relative zero threshold for rank decisions: `256 * eps * ||a||_F`.
///
/// Scale-invariant and precision-aware; overridable wherever a tolerance
/// parameter is exposed.
pub fn default_zero_tol<S: Scalar>(a: &DenseMatrix<S>) -> S {
    let k = S::of_f64(256.0);
    k * S::eps() * a.frob_norm()
}
