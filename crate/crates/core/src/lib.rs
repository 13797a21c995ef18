#![allow(clippy::needless_range_loop)] // index loops mirror the matrix math

//! Sliding-window bundle adjustment with square-root marginalization.
//!
//! The crate implements a small stereo visual(-inertial) odometry backend in two
//! interchangeable flavours: the conventional one that stores the marginalization
//! prior as a quadratic form `(H_m, b_m)` and eliminates old frames with the Schur
//! complement, and a square-root one that stores the prior as `(J_m, r_m)` and
//! eliminates frames with a rank-revealing, pivoting-free Householder QR whose
//! triangular factor never steps down more than one row per column. Both run in
//! single or double precision, and a synthetic odometry simulator plus prior
//! diagnostics (smallest eigenvalue, gauge-direction cost probes) make the
//! numerical differences between the two pipelines observable.
//!
//! Module map:
//! - [`linalg`]: dense matrix kernels (standard and flat Householder QR, LDLT
//!   square root, SVD pseudo-inverse and eigenvalue oracles)
//! - [`geometry`]: SO(3)/SE(3) helpers and the local parameterization
//! - [`problem`]: frames, landmarks, residual blocks and energy evaluation
//! - [`blocks`]: dense per-landmark Jacobian blocks and nullspace projection
//! - [`marg`]: marginalization priors, Schur-complement and QR marginalization
//! - [`estimator`]: the Levenberg-Marquardt sliding-window loop
//! - [`sim`]: synthetic world generation
//! - [`eval`]: trajectory error, gauge probes and prior diagnostics
//! - [`harness`]: experiment orchestration over the backend/precision matrix
//! - [`snapshot`]: versioned JSON fixtures for problems and priors

pub mod blocks;
pub mod estimator;
pub mod harness;
pub mod eval;
pub mod geometry;
pub mod marg;
pub mod problem;
pub mod sim;
pub mod snapshot;
pub mod linalg;

pub use linalg::{DenseMatrix, Scalar};
