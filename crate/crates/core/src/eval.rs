//! Evaluation metrics and prior diagnostics: translational RMSE after
//! closed-form SE(3) alignment, gauge-direction cost probes of the
//! marginalization prior, and its smallest eigenvalue. Diagnostics always
//! evaluate in double precision on an immutable prior snapshot.

use crate::geometry::{rotation_to_quaternion, Pose};
use crate::linalg::{min_eigenvalue, svd_rank, vec_dot, DenseMatrix, Scalar};
use crate::marg::{prior_delta, MarginalizationPrior};
use crate::problem::{FrameLin, GaugeMode};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory association needs at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("trajectory lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in trajectory file '{file}' line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },
}

/// Closed-form rigid alignment (rotation via orthogonal Procrustes on the
/// centered point sets, no scale) of `src` onto `dst`.
pub fn align_se3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = DenseMatrix::<f64>::zeros(3, 3);
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += dc[i] * sc[j];
            }
        }
    }
    let svd = crate::linalg::compact_svd(&cov, 0.0);
    // Full 3x3 factors (cov is generically full rank; rank-deficient cases
    // still produce a valid orthogonal factor from the kept columns).
    let mut u = Matrix3::<f64>::identity();
    let mut v = Matrix3::<f64>::identity();
    for k in 0..svd.rank.min(3) {
        for i in 0..3 {
            u[(i, k)] = svd.u1[(i, k)];
            v[(i, k)] = svd.v1[(i, k)];
        }
    }
    let mut rot = u * v.transpose();
    if rot.determinant() < 0.0 {
        // Reflection fix: flip the least-significant direction.
        let mut flip = Matrix3::<f64>::identity();
        flip[(2, 2)] = -1.0;
        rot = u * flip * v.transpose();
    }
    let t = mu_d - rot * mu_s;
    (rot, t)
}

/// Absolute trajectory error: translational RMSE of positions after rigid
/// SE(3) alignment of the estimate onto the ground truth.
pub fn ate_rmse(estimate: &[Pose<f64>], truth: &[Pose<f64>]) -> Result<f64, EvalError> {
    if estimate.len() != truth.len() {
        return Err(EvalError::LengthMismatch(estimate.len(), truth.len()));
    }
    if estimate.len() < 3 {
        return Err(EvalError::TooFewPoses(estimate.len()));
    }
    let src: Vec<Vector3<f64>> = estimate.iter().map(|p| p.trans).collect();
    let dst: Vec<Vector3<f64>> = truth.iter().map(|p| p.trans).collect();
    let (rot, t) = align_se3(&src, &dst);
    let mut acc = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let e = rot * s + t - d;
        acc += e.norm_squared();
    }
    Ok((acc / src.len() as f64).sqrt())
}

/// Prior cost change for unit-norm perturbations of the linearization point
/// along the global gauge candidates plus one random direction.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct ProbeCosts {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub random: f64,
}

impl ProbeCosts {
    pub fn gauge_directions(&self, gauge: GaugeMode) -> Vec<(&'static str, f64)> {
        match gauge {
            GaugeMode::VioLike => vec![
                ("tx", self.tx),
                ("ty", self.ty),
                ("tz", self.tz),
                ("yaw", self.yaw),
            ],
            GaugeMode::VoLike => vec![
                ("tx", self.tx),
                ("ty", self.ty),
                ("tz", self.tz),
                ("roll", self.roll),
                ("pitch", self.pitch),
                ("yaw", self.yaw),
            ],
        }
    }

    pub fn observable_rotations(&self, gauge: GaugeMode) -> Vec<(&'static str, f64)> {
        match gauge {
            GaugeMode::VioLike => vec![("roll", self.roll), ("pitch", self.pitch)],
            GaugeMode::VoLike => Vec::new(),
        }
    }
}

fn probe_energy(h: &DenseMatrix<f64>, b: &[f64], eps: &[f64]) -> f64 {
    let he = h.mul_vec(eps);
    0.5 * vec_dot(eps, &he) + vec_dot(eps, b)
}

fn normalize(eps: &mut [f64]) {
    let n = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in eps.iter_mut() {
            *v /= n;
        }
    }
}

/// Builds the chart perturbation corresponding to a global rigid motion
/// applied to every frame's linearization state jointly: a translation along
/// `axis`, or a linearized rotation about the world origin around `axis`.
fn global_motion_probe<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    axis: Vector3<f64>,
    rotation: bool,
) -> Vec<f64> {
    let mut eps = Vec::with_capacity(prior.dim());
    for (id, dim) in &prior.variable_index {
        let lin: FrameLin<f64> = prior.lin_point[id].cast();
        let rot_t = lin.pose.rot.transpose();
        if rotation {
            let rho = rot_t * axis.cross(&lin.pose.trans);
            let phi = rot_t * axis;
            eps.extend_from_slice(&[rho.x, rho.y, rho.z, phi.x, phi.y, phi.z]);
            if *dim > 6 {
                let v = lin.vel.unwrap_or_else(Vector3::zeros);
                let dv = axis.cross(&v);
                eps.extend_from_slice(&[dv.x, dv.y, dv.z]);
            }
        } else {
            let rho = rot_t * axis;
            eps.extend_from_slice(&[rho.x, rho.y, rho.z, 0.0, 0.0, 0.0]);
            if *dim > 6 {
                eps.extend_from_slice(&[0.0, 0.0, 0.0]);
            }
        }
    }
    normalize(&mut eps);
    eps
}

/// Evaluates the prior cost change for the six global-motion probes and a
/// random unit vector, in double precision. The prior is expected to carry
/// no gauge-fixing pose prior. `gauge_mode` only labels expectations (see
/// [`ProbeCosts::gauge_directions`]); all seven probes are always evaluated.
pub fn probe_nullspace<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    _gauge_mode: GaugeMode,
    rng: &mut impl Rng,
) -> ProbeCosts {
    if prior.is_empty() {
        return ProbeCosts::default();
    }
    let (h, b) = prior.quadratic_f64();
    let probe = |eps: Vec<f64>| probe_energy(&h, &b, &eps);
    let ex = Vector3::new(1.0, 0.0, 0.0);
    let ey = Vector3::new(0.0, 1.0, 0.0);
    let ez = Vector3::new(0.0, 0.0, 1.0);
    let mut random: Vec<f64> = (0..prior.dim())
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            z
        })
        .collect();
    normalize(&mut random);
    ProbeCosts {
        tx: probe(global_motion_probe(prior, ex, false)),
        ty: probe(global_motion_probe(prior, ey, false)),
        tz: probe(global_motion_probe(prior, ez, false)),
        roll: probe(global_motion_probe(prior, ex, true)),
        pitch: probe(global_motion_probe(prior, ey, true)),
        yaw: probe(global_motion_probe(prior, ez, true)),
        random: probe(random),
    }
}

use rand_distr::Distribution;

/// Smallest eigenvalue of the prior Hessian in double precision (the Gram
/// matrix for the square-root form); `None` for an empty prior.
pub fn track_sigma_min<S: Scalar>(prior: &MarginalizationPrior<S>) -> Option<f64> {
    if prior.is_empty() {
        return None;
    }
    let (h, _) = prior.quadratic_f64();
    min_eigenvalue(&h).ok()
}

/// Numerical rank of the prior: row count of the square-root factor, SVD
/// rank of the Hessian for the squared form.
pub fn prior_rank<S: Scalar>(prior: &MarginalizationPrior<S>) -> usize {
    match prior.sqrt_rows() {
        Some(rows) => rows,
        None => {
            let (h, _) = prior.quadratic_f64();
            svd_rank(&h, 1e-10)
        }
    }
}

/// Per-marginalization-event diagnostics record.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticsRecord {
    pub event_index: usize,
    pub sigma_min: Option<f64>,
    pub probes: ProbeCosts,
    pub prior_rank: usize,
    /// rank(J_marg) + rank(J_keep) - rank(J) of the marginalization input;
    /// nonzero when the deficiency couples the two blocks.
    pub rank_gap: i64,
}

pub const DIAGNOSTICS_CSV_HEADER: &str =
    "event,sigma_min,tx,ty,tz,roll,pitch,yaw,random,rank,rank_gap";

pub fn diagnostics_csv_row(rec: &DiagnosticsRecord) -> String {
    let sigma = rec
        .sigma_min
        .map_or_else(|| "absent".to_string(), |v| format!("{v:.17e}"));
    format!(
        "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
        rec.event_index,
        sigma,
        rec.probes.tx,
        rec.probes.ty,
        rec.probes.tz,
        rec.probes.roll,
        rec.probes.pitch,
        rec.probes.yaw,
        rec.probes.random,
        rec.prior_rank,
        rec.rank_gap
    )
}

/// Writes a trajectory in the plain `timestamp tx ty tz qx qy qz qw` format.
pub fn format_trajectory(poses: &[(f64, Pose<f64>)]) -> String {
    let mut out = String::new();
    for (ts, pose) in poses {
        let q = rotation_to_quaternion(&pose.rot);
        out.push_str(&format!(
            "{:.6} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}\n",
            ts, pose.trans.x, pose.trans.y, pose.trans.z, q[0], q[1], q[2], q[3]
        ));
    }
    out
}

pub fn parse_trajectory(content: &str, file: &str) -> Result<Vec<(f64, Pose<f64>)>, EvalError> {
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::Parse {
                file: file.to_string(),
                line: lineno + 1,
                detail: e.to_string(),
            })?;
        if fields.len() != 8 {
            return Err(EvalError::Parse {
                file: file.to_string(),
                line: lineno + 1,
                detail: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let rot = crate::geometry::quaternion_to_rotation(&[
            fields[4], fields[5], fields[6], fields[7],
        ]);
        out.push((
            fields[0],
            Pose::new(rot, Vector3::new(fields[1], fields[2], fields[3])),
        ));
    }
    Ok(out)
}

/// Convenience: the delta between the prior's stored expansion point and a
/// set of states, used by callers shifting priors onto frozen states.
pub fn delta_to_states<S: Scalar>(
    prior: &MarginalizationPrior<S>,
    states: &std::collections::BTreeMap<crate::problem::FrameId, FrameLin<S>>,
) -> Result<Vec<S>, crate::marg::MargError> {
    prior_delta(prior, states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_so3, se3_exp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose<f64>> {
        let mut out = Vec::new();
        let mut cur = Pose::identity();
        for _ in 0..n {
            out.push(cur.clone());
            let xi: Vec<f64> = (0..6)
                .map(|i| {
                    if i < 3 {
                        rng.random_range(-0.5..0.5)
                    } else {
                        rng.random_range(-0.1..0.1)
                    }
                })
                .collect();
            cur = cur.retract(&xi);
        }
        out
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = random_trajectory(&mut rng, 20);
        assert!(ate_rmse(&traj, &traj).unwrap() < 1e-14);
    }

    #[test]
    fn rigid_transform_is_aligned_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = random_trajectory(&mut rng, 25);
        let g = se3_exp(&[3.0, -1.0, 2.0, 0.4, -0.2, 0.9]);
        let moved: Vec<Pose<f64>> = traj.iter().map(|p| g.compose(p)).collect();
        assert!(ate_rmse(&moved, &traj).unwrap() < 1e-12);
    }

    #[test]
    fn too_few_poses_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = random_trajectory(&mut rng, 2);
        assert!(matches!(
            ate_rmse(&traj, &traj),
            Err(EvalError::TooFewPoses(2))
        ));
    }

    #[test]
    fn noisy_rmse_matches_dof_corrected_sigma_and_closed_form_is_optimal() {
        // truth + iid Gaussian position noise sigma: RMSE over n poses
        // concentrates near sigma * sqrt(3) * sqrt(1 - 2/n) (6 alignment
        // DOF over 3n residual dimensions), Monte-Carlo averaged; and no
        // perturbation of the closed-form alignment does better.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 60;
        let sigma = 0.3;
        let truth = random_trajectory(&mut rng, n);
        let mut rmses = Vec::new();
        let mut last_noisy = Vec::new();
        for _ in 0..40 {
            let noisy: Vec<Pose<f64>> = truth
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    for k in 0..3 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        q.trans[k] += sigma * z;
                    }
                    q
                })
                .collect();
            rmses.push(ate_rmse(&noisy, &truth).unwrap());
            last_noisy = noisy;
        }
        let mean = rmses.iter().sum::<f64>() / rmses.len() as f64;
        let expect = sigma * 3.0f64.sqrt() * (1.0 - 2.0 / n as f64).sqrt();
        assert!(
            (mean - expect).abs() < 0.05 * expect,
            "mean {mean}, expect {expect}"
        );

        // Brute-force search around the closed-form alignment.
        let src: Vec<Vector3<f64>> = last_noisy.iter().map(|p| p.trans).collect();
        let dst: Vec<Vector3<f64>> = truth.iter().map(|p| p.trans).collect();
        let (rot, t) = align_se3(&src, &dst);
        let cost = |rot: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
            src.iter()
                .zip(&dst)
                .map(|(s, d)| (rot * s + t - d).norm_squared())
                .sum()
        };
        let best = cost(&rot, &t);
        for _ in 0..400 {
            let d_rot = exp_so3(&Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            ));
            let d_t = Vector3::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            );
            let c = cost(&(d_rot * rot), &(t + d_t));
            assert!(c >= best - 1e-9, "perturbation beats closed form");
        }
    }

    #[test]
    fn empty_prior_probes_are_zero_and_sigma_absent() {
        let prior = MarginalizationPrior::<f64>::empty();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probes = probe_nullspace(&prior, GaugeMode::VoLike, &mut rng);
        assert_eq!(probes.tx, 0.0);
        assert_eq!(probes.random, 0.0);
        assert!(track_sigma_min(&prior).is_none());
    }

    #[test]
    fn trajectory_format_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let traj: Vec<(f64, Pose<f64>)> = random_trajectory(&mut rng, 10)
            .into_iter()
            .enumerate()
            .map(|(i, p)| (i as f64 * 0.1, p))
            .collect();
        let text = format_trajectory(&traj);
        let back = parse_trajectory(&text, "mem").unwrap();
        assert_eq!(back.len(), traj.len());
        for ((ta, pa), (tb, pb)) in traj.iter().zip(&back) {
            assert!((ta - tb).abs() < 1e-9);
            assert!((pa.trans - pb.trans).norm() < 1e-8);
            assert!((pa.rot - pb.rot).norm() < 1e-7);
        }
        // Corrupt line reports file and line number.
        let mut bad = text.clone();
        bad.push_str("0.1 broken line\n");
        let err = parse_trajectory(&bad, "bad.txt").unwrap_err();
        assert!(matches!(err, EvalError::Parse { .. }));
        assert!(err.to_string().contains("bad.txt"));
    }
}
