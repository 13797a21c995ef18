//! Rotation and rigid-transform helpers for the right-multiplicative se(3)
//! local parameterization.
//!
//! Conventions: a [`Pose`] maps body coordinates to world coordinates,
//! `x_w = R x_b + t`. The local chart at a pose is the right increment
//! `pose * exp(xi)` with `xi = (rho, phi)` stacking translation before
//! rotation; velocities (when present) live in the world frame and update
//! additively.

use crate::linalg::Scalar;
use nalgebra::{Matrix3, Vector3};

pub fn hat<S: Scalar>(v: &Vector3<S>) -> Matrix3<S> {
    Matrix3::new(
        S::zero(),
        -v.z,
        v.y,
        v.z,
        S::zero(),
        -v.x,
        -v.y,
        v.x,
        S::zero(),
    )
}

fn small_angle<S: Scalar>(theta2: S) -> bool {
    // eps^(1/2) on the squared angle keeps the series branch accurate to
    // machine precision for both instantiations.
    theta2 < S::eps().sqrt() * S::of_f64(0.01)
}

/// Rodrigues formula.
pub fn exp_so3<S: Scalar>(phi: &Vector3<S>) -> Matrix3<S> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if small_angle(theta2) {
        let half = S::of_f64(0.5);
        return Matrix3::identity() + k + k * k * half;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (S::one() - theta.cos()) / theta2;
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`exp_so3`], robust near zero and near pi.
pub fn log_so3<S: Scalar>(r: &Matrix3<S>) -> Vector3<S> {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let half = S::of_f64(0.5);
    let cos_theta = ((trace - S::one()) * half).clamp(-S::one(), S::one());
    let theta = cos_theta.acos();
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < S::of_f64(1e-6) {
        return skew * half;
    }
    if theta > S::of_f64(std::f64::consts::PI - 1e-4) {
        // Near pi the skew part degenerates; recover the axis from the
        // symmetric part, R ~ 2 n n^T - I, anchored at the largest diagonal.
        let four = S::of_f64(4.0);
        let sx = r[(0, 0)] + S::one();
        let sy = r[(1, 1)] + S::one();
        let sz = r[(2, 2)] + S::one();
        let axis = if sx >= sy && sx >= sz {
            let x = (sx * half).sqrt();
            Vector3::new(x, (r[(0, 1)] + r[(1, 0)]) / (four * x), (r[(0, 2)] + r[(2, 0)]) / (four * x))
        } else if sy >= sz {
            let y = (sy * half).sqrt();
            Vector3::new((r[(0, 1)] + r[(1, 0)]) / (four * y), y, (r[(1, 2)] + r[(2, 1)]) / (four * y))
        } else {
            let z = (sz * half).sqrt();
            Vector3::new((r[(0, 2)] + r[(2, 0)]) / (four * z), (r[(1, 2)] + r[(2, 1)]) / (four * z), z)
        };
        let axis = axis.normalize();
        // Fix the sign using the skew part (identically zero exactly at pi).
        let sign = if skew.dot(&axis) < S::zero() { -S::one() } else { S::one() };
        return axis * theta * sign;
    }
    skew * (theta / (S::of_f64(2.0) * theta.sin()))
}

/// Left Jacobian of SO(3): `exp((phi + d)^) ~ exp(J_l(phi) d ^) exp(phi^)`.
pub fn left_jacobian_so3<S: Scalar>(phi: &Vector3<S>) -> Matrix3<S> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    if small_angle(theta2) {
        let half = S::of_f64(0.5);
        let sixth = S::of_f64(1.0 / 6.0);
        return Matrix3::identity() + k * half + k * k * sixth;
    }
    let theta = theta2.sqrt();
    let a = (S::one() - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() + k * a + k * k * b
}

fn jl_inv_coeff<S: Scalar>(theta2: S) -> S {
    if small_angle(theta2) {
        return S::of_f64(1.0 / 12.0) + theta2 * S::of_f64(1.0 / 720.0);
    }
    let theta = theta2.sqrt();
    S::one() / theta2 - (S::one() + theta.cos()) / (S::of_f64(2.0) * theta * theta.sin())
}

/// Inverse of the left Jacobian of SO(3).
pub fn left_jacobian_inv_so3<S: Scalar>(phi: &Vector3<S>) -> Matrix3<S> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let half = S::of_f64(0.5);
    Matrix3::identity() - k * half + k * k * jl_inv_coeff(theta2)
}

/// Inverse of the right Jacobian of SO(3): `J_r(phi) = J_l(-phi)`.
pub fn right_jacobian_inv_so3<S: Scalar>(phi: &Vector3<S>) -> Matrix3<S> {
    left_jacobian_inv_so3(&(-phi))
}

/// Rigid transform with rotation stored as an orthonormal matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<S: Scalar> {
    pub rot: Matrix3<S>,
    pub trans: Vector3<S>,
}

impl<S: Scalar> Pose<S> {
    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Matrix3<S>, trans: Vector3<S>) -> Self {
        Self { rot, trans }
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    pub fn transform(&self, p: &Vector3<S>) -> Vector3<S> {
        self.rot * p + self.trans
    }

    /// Right-multiplicative retraction `self * exp(xi)` with rotation
    /// re-orthonormalization.
    pub fn retract(&self, xi: &[S]) -> Self {
        debug_assert_eq!(xi.len(), 6);
        let inc = se3_exp(xi);
        let mut out = self.compose(&inc);
        out.orthonormalize();
        out
    }

    /// Chart inverse: `xi` with `other = self * exp(xi)`.
    pub fn local_coordinates(&self, other: &Self) -> [S; 6] {
        se3_log(&self.inverse().compose(other))
    }

    /// Two Newton steps of `R <- R (3I - R^T R) / 2`; quadratic convergence
    /// keeps the rotation orthonormal to machine precision after retraction.
    pub fn orthonormalize(&mut self) {
        for _ in 0..2 {
            let rtr = self.rot.transpose() * self.rot;
            let correction = Matrix3::identity() * S::of_f64(3.0) - rtr;
            self.rot = self.rot * correction * S::of_f64(0.5);
        }
    }

    pub fn orthonormality_error(&self) -> S {
        (self.rot.transpose() * self.rot - Matrix3::identity()).norm()
    }

    pub fn to_f64(&self) -> Pose<f64> {
        Pose {
            rot: self.rot.map(|v| v.as_f64()),
            trans: self.trans.map(|v| v.as_f64()),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Pose<T> {
        Pose {
            rot: self.rot.map(|v| T::of_f64(v.as_f64())),
            trans: self.trans.map(|v| T::of_f64(v.as_f64())),
        }
    }
}

/// SE(3) exponential of `xi = (rho, phi)`.
pub fn se3_exp<S: Scalar>(xi: &[S]) -> Pose<S> {
    debug_assert_eq!(xi.len(), 6);
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    Pose {
        rot: exp_so3(&phi),
        trans: left_jacobian_so3(&phi) * rho,
    }
}

/// SE(3) logarithm, inverse of [`se3_exp`].
pub fn se3_log<S: Scalar>(pose: &Pose<S>) -> [S; 6] {
    let phi = log_so3(&pose.rot);
    let rho = left_jacobian_inv_so3(&phi) * pose.trans;
    [rho.x, rho.y, rho.z, phi.x, phi.y, phi.z]
}

/// Rotation matrix to `(qx, qy, qz, qw)`, for trajectory output.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    [q.i, q.j, q.k, q.w]
}

/// `(qx, qy, qz, qw)` to rotation matrix, for trajectory parsing.
pub fn quaternion_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        q[3], q[0], q[1], q[2],
    ));
    *uq.to_rotation_matrix().matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn so3_exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            // Stay inside the principal ball so log is the exact inverse.
            let phi = random_vec3(&mut rng, 1.0);
            let back = log_so3(&exp_so3(&phi));
            assert!((phi - back).norm() < 1e-10, "phi {phi:?} back {back:?}");
        }
        // Tiny angles hit the series branch.
        let phi = Vector3::new(1e-9, -2e-9, 5e-10);
        assert!((log_so3(&exp_so3(&phi)) - phi).norm() < 1e-15);
        // Near-pi angles hit the symmetric-part branch.
        for axis in [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-0.3, 0.8, 0.52).normalize(),
        ] {
            let phi = axis * (std::f64::consts::PI - 1e-5);
            let back = log_so3(&exp_so3(&phi));
            assert!((phi - back).norm() < 1e-6, "near-pi: {phi:?} vs {back:?}");
        }
    }

    #[test]
    fn jl_inv_is_inverse_of_jl() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let phi = random_vec3(&mut rng, 2.5);
            let prod = left_jacobian_so3(&phi) * left_jacobian_inv_so3(&phi);
            assert!((prod - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn right_jacobian_inv_matches_finite_difference() {
        // d/d eps log(exp(phi) exp(eps e_i)) = Jr^-1(phi) e_i
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let phi = random_vec3(&mut rng, 1.5);
            let r = exp_so3(&phi);
            let jr_inv = right_jacobian_inv_so3(&phi);
            let h = 1e-7;
            for i in 0..3 {
                let mut d = Vector3::zeros();
                d[i] = h;
                let plus = log_so3(&(r * exp_so3(&d)));
                let minus = log_so3(&(r * exp_so3(&(-d))));
                let fd = (plus - minus) / (2.0 * h);
                let col = jr_inv.column(i);
                assert!((fd - col).norm() < 1e-6, "axis {i}: fd {fd:?} vs {col:?}");
            }
        }
    }

    #[test]
    fn se3_exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let xi: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let pose = se3_exp(&xi);
            let back = se3_log(&pose);
            for (a, b) in xi.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn retract_keeps_rotation_orthonormal() {
        let mut pose = Pose::<f32>::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let xi: Vec<f32> = (0..6).map(|_| rng.random_range(-0.1..0.1f32)).collect();
            pose = pose.retract(&xi);
        }
        assert!(pose.orthonormality_error() <= 10.0 * f32::EPSILON);
    }

    #[test]
    fn local_coordinates_inverts_retract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = Pose::new(exp_so3(&random_vec3(&mut rng, 1.0)), random_vec3(&mut rng, 3.0));
        let xi: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let moved = base.retract(&xi);
        let back = base.local_coordinates(&moved);
        for (a, b) in xi.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quaternion_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = exp_so3(&random_vec3(&mut rng, 2.0));
        let q = rotation_to_quaternion(&r);
        let r2 = quaternion_to_rotation(&q);
        assert!((r - r2).norm() < 1e-12);
    }
}
