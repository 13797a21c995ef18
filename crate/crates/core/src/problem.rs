//! Problem representation: keyframe states on SE(3) (with an optional
//! velocity block), inverse-depth landmarks, residual blocks with analytic
//! Jacobians, and total-energy evaluation.
//!
//! Residual models:
//! - `Reprojection`: one stereo camera observation (2 rows) of an
//!   inverse-depth landmark anchored in its host frame's left camera.
//! - `RelativeMotion`: odometry between consecutive frames; 6 rows in
//!   `VoLike` mode, 9 rows in `VioLike` mode where the velocity rows couple
//!   to gravity and make roll/pitch observable (4 remaining gauge directions
//!   instead of 6).
//! - `AbsolutePrior`: a gauge-fixing pose prior used during optimization
//!   only; it never enters the marginalization prior.
//!
//! Jacobians are taken with respect to the right-multiplicative se(3)
//! increment `[rho, phi]` per frame (plus an additive velocity increment in
//! `VioLike` mode). Frames connected to the marginalization prior keep a
//! frozen linearization state: Jacobians use it, residual values always use
//! the current state.

use crate::geometry::{exp_so3, hat, log_so3, right_jacobian_inv_so3, Pose};
use crate::linalg::{DenseMatrix, Scalar};
use crate::marg::MarginalizationPrior;
use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct FrameId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct LandmarkId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GaugeMode {
    /// Gravity-coupled odometry: 4 expected gauge directions
    /// (global translation + yaw).
    VioLike,
    /// Pure relative odometry: 6 expected gauge directions.
    VoLike,
}

impl GaugeMode {
    /// Per-frame local dimension: pose (6) plus velocity (3) when inertial.
    pub fn frame_dim(self) -> usize {
        match self {
            GaugeMode::VioLike => 9,
            GaugeMode::VoLike => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CameraSide {
    Left,
    Right,
}

/// Pinhole stereo rig; the left camera frame coincides with the body frame
/// and the right camera sits at `baseline` along +x.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct StereoCamera<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub baseline: S,
    pub width: f64,
    pub height: f64,
}

impl<S: Scalar> StereoCamera<S> {
    pub fn min_depth() -> S {
        S::of_f64(1e-2)
    }

    pub fn cast<T: Scalar>(&self) -> StereoCamera<T> {
        StereoCamera {
            fx: T::of_f64(self.fx.as_f64()),
            fy: T::of_f64(self.fy.as_f64()),
            cx: T::of_f64(self.cx.as_f64()),
            cy: T::of_f64(self.cy.as_f64()),
            baseline: T::of_f64(self.baseline.as_f64()),
            width: self.width,
            height: self.height,
        }
    }

    /// Projects a point in the given camera's coordinates; `None` behind the
    /// near plane.
    pub fn project(&self, p_cam: &Vector3<S>) -> Option<[S; 2]> {
        if p_cam.z <= Self::min_depth() {
            return None;
        }
        Some([
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ])
    }

    /// 2x3 Jacobian of the projection at `p_cam`.
    pub fn projection_jacobian(&self, p_cam: &Vector3<S>) -> DenseMatrix<S> {
        let z_inv = S::one() / p_cam.z;
        let mut j = DenseMatrix::zeros(2, 3);
        j[(0, 0)] = self.fx * z_inv;
        j[(0, 2)] = -self.fx * p_cam.x * z_inv * z_inv;
        j[(1, 1)] = self.fy * z_inv;
        j[(1, 2)] = -self.fy * p_cam.y * z_inv * z_inv;
        j
    }

    pub fn in_image(&self, uv: &[f64; 2], margin: f64) -> bool {
        uv[0] >= margin
            && uv[0] <= self.width - margin
            && uv[1] >= margin
            && uv[1] <= self.height - margin
    }
}

/// Frozen linearization state of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLin<S: Scalar> {
    pub pose: Pose<S>,
    pub vel: Option<Vector3<S>>,
}

impl<S: Scalar> FrameLin<S> {
    /// Chart inverse at `self`: coordinates of `other` in the local chart,
    /// `[rho, phi, (dv)]`.
    pub fn local_coordinates(&self, other: &FrameLin<S>, dim: usize) -> Vec<S> {
        let mut out = Vec::with_capacity(dim);
        out.extend_from_slice(&self.pose.local_coordinates(&other.pose));
        if dim > 6 {
            let v0 = self.vel.unwrap_or_else(Vector3::zeros);
            let v1 = other.vel.unwrap_or_else(Vector3::zeros);
            let dv = v1 - v0;
            out.extend_from_slice(&[dv.x, dv.y, dv.z]);
        }
        out
    }

    /// Retracts `self` by `delta` in the local chart.
    pub fn retract(&self, delta: &[S]) -> FrameLin<S> {
        let pose = self.pose.retract(&delta[..6]);
        let vel = if delta.len() > 6 {
            let v = self.vel.unwrap_or_else(Vector3::zeros);
            Some(v + Vector3::new(delta[6], delta[7], delta[8]))
        } else {
            self.vel
        };
        FrameLin { pose, vel }
    }

    pub fn cast<T: Scalar>(&self) -> FrameLin<T> {
        FrameLin {
            pose: self.pose.cast(),
            vel: self.vel.map(|v| v.map(|x| T::of_f64(x.as_f64()))),
        }
    }
}

/// One keyframe's state. `lin`, once frozen, never changes; it is set when
/// the frame first becomes connected to the marginalization prior.
#[derive(Clone, Debug)]
pub struct FrameState<S: Scalar> {
    pub id: FrameId,
    pub pose: Pose<S>,
    pub vel: Option<Vector3<S>>,
    pub lin: Option<FrameLin<S>>,
}

impl<S: Scalar> FrameState<S> {
    pub fn current(&self) -> FrameLin<S> {
        FrameLin {
            pose: self.pose.clone(),
            vel: self.vel,
        }
    }

    /// State at which Jacobians are evaluated: the frozen linearization
    /// state when present, the current state otherwise.
    pub fn eval_state(&self) -> FrameLin<S> {
        self.lin.clone().unwrap_or_else(|| self.current())
    }

    pub fn freeze(&mut self) {
        if self.lin.is_none() {
            self.lin = Some(self.current());
        }
    }
}

/// Inverse-depth landmark anchored in the left camera of its host frame:
/// the point is `(bearing_x, bearing_y, 1) / inv_depth` in host coordinates.
#[derive(Clone, Debug)]
pub struct Landmark<S> {
    pub id: LandmarkId,
    pub host: FrameId,
    pub bearing: [S; 2],
    pub inv_depth: S,
}

impl<S: Scalar> Landmark<S> {
    pub fn point_in_host(&self) -> Vector3<S> {
        Vector3::new(self.bearing[0], self.bearing[1], S::one()) / self.inv_depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResidualKind {
    Reprojection { cam: CameraSide },
    RelativeMotion,
    AbsolutePrior,
}

/// One residual block. Measurement layout is kind-specific:
/// - `Reprojection`: `[u, v]`, `frames = [target]`, landmark set
/// - `RelativeMotion` (VoLike): `[dp(3), omega(3)]`, `frames = [i, j]`
/// - `RelativeMotion` (VioLike): `[dp(3), omega(3), dv(3), dt]`
/// - `AbsolutePrior`: `[p(3), omega(3)]`, `frames = [i]`
#[derive(Clone, Debug)]
pub struct ResidualBlock<S> {
    pub kind: ResidualKind,
    pub frames: Vec<FrameId>,
    pub landmark: Option<LandmarkId>,
    pub measurement: Vec<S>,
    pub weight_sqrt: Vec<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn dim(&self, gauge: GaugeMode) -> usize {
        match self.kind {
            ResidualKind::Reprojection { .. } => 2,
            ResidualKind::RelativeMotion => match gauge {
                GaugeMode::VioLike => 9,
                GaugeMode::VoLike => 6,
            },
            ResidualKind::AbsolutePrior => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum VarRef {
    Frame(FrameId),
    Landmark(LandmarkId),
}

/// Marginalization classes of the pending event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarClass {
    /// Scheduled for marginalization.
    Marginalized,
    /// Shares residuals with marginalized variables or carries prior mass.
    Connected,
    /// Untouched by the event.
    Free,
}

#[derive(Clone, Debug, Default)]
pub struct Partition {
    classes: BTreeMap<FrameId, VarClass>,
}

impl Partition {
    pub fn new(classes: BTreeMap<FrameId, VarClass>) -> Self {
        Self { classes }
    }

    pub fn class(&self, id: FrameId) -> VarClass {
        self.classes.get(&id).copied().unwrap_or(VarClass::Free)
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("unknown frame {0:?}")]
    UnknownFrame(FrameId),
    #[error("unknown landmark {0:?}")]
    UnknownLandmark(LandmarkId),
    #[error("prior evaluation: {0}")]
    Prior(String),
}

/// The unit the estimator optimizes and marginalizes: active frames,
/// landmarks, residual blocks and the current marginalization prior.
#[derive(Clone, Debug)]
pub struct WindowProblem<S: Scalar> {
    pub gauge: GaugeMode,
    pub camera: StereoCamera<S>,
    pub gravity: Vector3<S>,
    pub frames: Vec<FrameState<S>>,
    pub landmarks: BTreeMap<LandmarkId, Landmark<S>>,
    pub residuals: Vec<ResidualBlock<S>>,
    pub prior: MarginalizationPrior<S>,
    pub partition: Option<Partition>,
}

impl<S: Scalar> WindowProblem<S> {
    pub fn new(gauge: GaugeMode, camera: StereoCamera<S>, gravity: Vector3<S>) -> Self {
        Self {
            gauge,
            camera,
            gravity,
            frames: Vec::new(),
            landmarks: BTreeMap::new(),
            residuals: Vec::new(),
            prior: MarginalizationPrior::empty(),
            partition: None,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.gauge.frame_dim()
    }

    pub fn frame(&self, id: FrameId) -> Result<&FrameState<S>, ProblemError> {
        self.frames
            .iter()
            .find(|f| f.id == id)
            .ok_or(ProblemError::UnknownFrame(id))
    }

    pub fn frame_mut(&mut self, id: FrameId) -> Result<&mut FrameState<S>, ProblemError> {
        self.frames
            .iter_mut()
            .find(|f| f.id == id)
            .ok_or(ProblemError::UnknownFrame(id))
    }

    pub fn landmark(&self, id: LandmarkId) -> Result<&Landmark<S>, ProblemError> {
        self.landmarks
            .get(&id)
            .ok_or(ProblemError::UnknownLandmark(id))
    }

    pub fn current_states(&self) -> BTreeMap<FrameId, FrameLin<S>> {
        self.frames.iter().map(|f| (f.id, f.current())).collect()
    }
}

/// Outcome of evaluating one residual block.
pub enum EvalResult<S> {
    Valid(ResidualEval<S>),
    /// Excluded this iteration (e.g. landmark behind a camera); not fatal.
    Invalid(&'static str),
}

pub struct ResidualEval<S> {
    /// Weighted residual.
    pub residual: Vec<S>,
    /// Weighted Jacobian rows per referenced variable, in the block's local
    /// chart; one entry per distinct variable.
    pub jacobians: Vec<(VarRef, DenseMatrix<S>)>,
}

struct FrameView<S: Scalar> {
    rot: Matrix3<S>,
    pos: Vector3<S>,
    vel: Vector3<S>,
}

impl<S: Scalar> FrameView<S> {
    fn of(lin: &FrameLin<S>) -> Self {
        Self {
            rot: lin.pose.rot,
            pos: lin.pose.trans,
            vel: lin.vel.unwrap_or_else(Vector3::zeros),
        }
    }
}

fn set_block3<S: Scalar>(j: &mut DenseMatrix<S>, r0: usize, c0: usize, m: &Matrix3<S>) {
    for i in 0..3 {
        for k in 0..3 {
            j[(r0 + i, c0 + k)] = m[(i, k)];
        }
    }
}

/// Evaluates one residual block: weighted residual at the current states,
/// weighted Jacobians at the per-frame evaluation states (frozen
/// linearization states where present).
pub fn evaluate_residual<S: Scalar>(
    block: &ResidualBlock<S>,
    problem: &WindowProblem<S>,
) -> Result<EvalResult<S>, ProblemError> {
    match block.kind {
        ResidualKind::Reprojection { cam } => eval_reprojection(block, problem, cam),
        ResidualKind::RelativeMotion => eval_relative_motion(block, problem),
        ResidualKind::AbsolutePrior => eval_absolute_prior(block, problem),
    }
}

fn apply_weights<S: Scalar>(r: &mut [S], jacobians: &mut [(VarRef, DenseMatrix<S>)], w: &[S]) {
    debug_assert_eq!(r.len(), w.len());
    for (ri, wi) in r.iter_mut().zip(w) {
        *ri *= *wi;
    }
    for (_, j) in jacobians.iter_mut() {
        for row in 0..j.rows() {
            let wi = w[row];
            for col in 0..j.cols() {
                j[(row, col)] *= wi;
            }
        }
    }
}

fn eval_reprojection<S: Scalar>(
    block: &ResidualBlock<S>,
    problem: &WindowProblem<S>,
    cam: CameraSide,
) -> Result<EvalResult<S>, ProblemError> {
    let lm_id = block
        .landmark
        .ok_or(ProblemError::Prior("reprojection without landmark".into()))?;
    let lm = problem.landmark(lm_id)?;
    let target = problem.frame(block.frames[0])?;
    let host = problem.frame(lm.host)?;
    let dim = problem.frame_dim();

    // Point in the target camera for a given pair of frame states.
    let point_in_cam = |h: &FrameView<S>, t: &FrameView<S>| -> (Vector3<S>, Vector3<S>) {
        let p_host = lm.point_in_host();
        let x_w = h.rot * p_host + h.pos;
        let p_body = t.rot.transpose() * (x_w - t.pos);
        let p_cam = match cam {
            CameraSide::Left => p_body,
            CameraSide::Right => p_body - Vector3::new(problem.camera.baseline, S::zero(), S::zero()),
        };
        (p_body, p_cam)
    };

    let host_cur = FrameView::of(&host.current());
    let tgt_cur = FrameView::of(&target.current());
    let (_, p_cam_cur) = point_in_cam(&host_cur, &tgt_cur);
    let Some(uv) = problem.camera.project(&p_cam_cur) else {
        return Ok(EvalResult::Invalid("behind camera"));
    };
    let mut r = vec![uv[0] - block.measurement[0], uv[1] - block.measurement[1]];

    // Jacobians at the evaluation states.
    let host_eval = FrameView::of(&host.eval_state());
    let tgt_eval = FrameView::of(&target.eval_state());
    let (_, p_cam_eval) = point_in_cam(&host_eval, &tgt_eval);
    if p_cam_eval.z <= StereoCamera::<S>::min_depth() {
        return Ok(EvalResult::Invalid("behind camera at linearization state"));
    }
    let dproj = problem.camera.projection_jacobian(&p_cam_eval);

    let rt_t = tgt_eval.rot.transpose();
    let p_host = lm.point_in_host();

    // d p_cam / d xi of target and host, then landmark parameters.
    let mut d_target = DenseMatrix::<S>::zeros(3, dim);
    set_block3(&mut d_target, 0, 0, &(-Matrix3::identity()));
    let q_body = rt_t * (host_eval.rot * p_host + host_eval.pos - tgt_eval.pos);
    set_block3(&mut d_target, 0, 3, &hat(&q_body));

    let mut d_host = DenseMatrix::<S>::zeros(3, dim);
    let rt_rh = rt_t * host_eval.rot;
    set_block3(&mut d_host, 0, 0, &rt_rh);
    set_block3(&mut d_host, 0, 3, &(-(rt_rh * hat(&p_host))));

    let mut d_lm = DenseMatrix::<S>::zeros(3, 3);
    let inv_rho = S::one() / lm.inv_depth;
    for i in 0..3 {
        d_lm[(i, 0)] = rt_rh[(i, 0)] * inv_rho;
        d_lm[(i, 1)] = rt_rh[(i, 1)] * inv_rho;
    }
    let dp_drho = -(rt_rh * p_host) * inv_rho;
    for i in 0..3 {
        d_lm[(i, 2)] = dp_drho[i];
    }

    let j_target = dproj.mul(&d_target);
    let j_host = dproj.mul(&d_host);
    let j_lm = dproj.mul(&d_lm);

    let mut jacobians: Vec<(VarRef, DenseMatrix<S>)> = Vec::with_capacity(3);
    if target.id == lm.host {
        jacobians.push((VarRef::Frame(target.id), j_target.add(&j_host)));
    } else {
        jacobians.push((VarRef::Frame(target.id), j_target));
        jacobians.push((VarRef::Frame(lm.host), j_host));
    }
    jacobians.push((VarRef::Landmark(lm_id), j_lm));

    apply_weights(&mut r, &mut jacobians, &block.weight_sqrt);
    Ok(EvalResult::Valid(ResidualEval {
        residual: r,
        jacobians,
    }))
}

fn eval_relative_motion<S: Scalar>(
    block: &ResidualBlock<S>,
    problem: &WindowProblem<S>,
) -> Result<EvalResult<S>, ProblemError> {
    let fi = problem.frame(block.frames[0])?;
    let fj = problem.frame(block.frames[1])?;
    let dim = problem.frame_dim();
    let n_rows = block.dim(problem.gauge);
    let inertial = problem.gauge == GaugeMode::VioLike;

    let dp_m = Vector3::new(block.measurement[0], block.measurement[1], block.measurement[2]);
    let omega_m = Vector3::new(block.measurement[3], block.measurement[4], block.measurement[5]);
    let rot_m = exp_so3(&omega_m);
    let (dv_m, dt) = if inertial {
        (
            Vector3::new(block.measurement[6], block.measurement[7], block.measurement[8]),
            block.measurement[9],
        )
    } else {
        (Vector3::zeros(), S::zero())
    };

    let residual_at = |i: &FrameView<S>, j: &FrameView<S>| -> Vec<S> {
        let rit = i.rot.transpose();
        let mut r = Vec::with_capacity(n_rows);
        let half = S::of_f64(0.5);
        let p_arg = if inertial {
            j.pos - i.pos - i.vel * dt - problem.gravity * (half * dt * dt)
        } else {
            j.pos - i.pos
        };
        let r_pos = rit * p_arg - dp_m;
        r.extend_from_slice(&[r_pos.x, r_pos.y, r_pos.z]);
        let r_rot = log_so3(&(rot_m.transpose() * (rit * j.rot)));
        r.extend_from_slice(&[r_rot.x, r_rot.y, r_rot.z]);
        if inertial {
            let r_vel = rit * (j.vel - i.vel - problem.gravity * dt) - dv_m;
            r.extend_from_slice(&[r_vel.x, r_vel.y, r_vel.z]);
        }
        r
    };

    let cur_i = FrameView::of(&fi.current());
    let cur_j = FrameView::of(&fj.current());
    let mut r = residual_at(&cur_i, &cur_j);

    let ev_i = FrameView::of(&fi.eval_state());
    let ev_j = FrameView::of(&fj.eval_state());
    let rit = ev_i.rot.transpose();
    let b_rel = rit * ev_j.rot;
    let r_rot_eval = log_so3(&(rot_m.transpose() * b_rel));
    let jr_inv = right_jacobian_inv_so3(&r_rot_eval);
    let half = S::of_f64(0.5);

    let mut j_i = DenseMatrix::<S>::zeros(n_rows, dim);
    let mut j_j = DenseMatrix::<S>::zeros(n_rows, dim);

    // Position rows.
    set_block3(&mut j_i, 0, 0, &(-Matrix3::identity()));
    let p_arg = if inertial {
        ev_j.pos - ev_i.pos - ev_i.vel * dt - problem.gravity * (half * dt * dt)
    } else {
        ev_j.pos - ev_i.pos
    };
    set_block3(&mut j_i, 0, 3, &hat(&(rit * p_arg)));
    set_block3(&mut j_j, 0, 0, &b_rel);
    if inertial {
        set_block3(&mut j_i, 0, 6, &(rit * -dt));
    }

    // Rotation rows.
    set_block3(&mut j_i, 3, 3, &(-(jr_inv * b_rel.transpose())));
    set_block3(&mut j_j, 3, 3, &jr_inv);

    // Velocity rows.
    if inertial {
        let w = ev_j.vel - ev_i.vel - problem.gravity * dt;
        set_block3(&mut j_i, 6, 3, &hat(&(rit * w)));
        set_block3(&mut j_i, 6, 6, &(-rit));
        set_block3(&mut j_j, 6, 6, &rit);
    }

    let mut jacobians = vec![
        (VarRef::Frame(fi.id), j_i),
        (VarRef::Frame(fj.id), j_j),
    ];
    apply_weights(&mut r, &mut jacobians, &block.weight_sqrt);
    Ok(EvalResult::Valid(ResidualEval {
        residual: r,
        jacobians,
    }))
}

fn eval_absolute_prior<S: Scalar>(
    block: &ResidualBlock<S>,
    problem: &WindowProblem<S>,
) -> Result<EvalResult<S>, ProblemError> {
    let f = problem.frame(block.frames[0])?;
    let dim = problem.frame_dim();

    let p_m = Vector3::new(block.measurement[0], block.measurement[1], block.measurement[2]);
    let omega_m = Vector3::new(block.measurement[3], block.measurement[4], block.measurement[5]);
    let rot_m = exp_so3(&omega_m);
    let rot_m_t = rot_m.transpose();

    let residual_at = |v: &FrameView<S>| -> (Vec<S>, Vector3<S>) {
        let r_pos = rot_m_t * (v.pos - p_m);
        let r_rot = log_so3(&(rot_m_t * v.rot));
        (
            vec![r_pos.x, r_pos.y, r_pos.z, r_rot.x, r_rot.y, r_rot.z],
            r_rot,
        )
    };

    let (mut r, _) = residual_at(&FrameView::of(&f.current()));
    let ev = FrameView::of(&f.eval_state());
    let (_, r_rot_eval) = residual_at(&ev);

    let mut j = DenseMatrix::<S>::zeros(6, dim);
    set_block3(&mut j, 0, 0, &(rot_m_t * ev.rot));
    set_block3(&mut j, 3, 3, &right_jacobian_inv_so3(&r_rot_eval));

    let mut jacobians = vec![(VarRef::Frame(f.id), j)];
    apply_weights(&mut r, &mut jacobians, &block.weight_sqrt);
    Ok(EvalResult::Valid(ResidualEval {
        residual: r,
        jacobians,
    }))
}

/// Sliding-window energy: half the squared norm of all valid active
/// residuals plus the marginalization prior energy.
pub fn total_energy<S: Scalar>(problem: &WindowProblem<S>) -> Result<S, ProblemError> {
    let half = S::of_f64(0.5);
    let mut e = S::zero();
    for block in &problem.residuals {
        if let EvalResult::Valid(eval) = evaluate_residual(block, problem)? {
            e += half
                * eval
                    .residual
                    .iter()
                    .fold(S::zero(), |acc, v| acc + *v * *v);
        }
    }
    let states = problem.current_states();
    let prior_e = crate::marg::prior_energy(&problem.prior, &states)
        .map_err(|err| ProblemError::Prior(err.to_string()))?;
    Ok(e + prior_e)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::se3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_camera() -> StereoCamera<f64> {
        StereoCamera {
            fx: 450.0,
            fy: 450.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.12,
            width: 640.0,
            height: 480.0,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng, t_scale: f64, r_scale: f64) -> Pose<f64> {
        let xi: Vec<f64> = (0..6)
            .map(|i| {
                if i < 3 {
                    rng.random_range(-t_scale..t_scale)
                } else {
                    rng.random_range(-r_scale..r_scale)
                }
            })
            .collect();
        se3_exp(&xi)
    }

    /// Builds a two-frame problem with one landmark observed from both
    /// frames, at poses that keep it comfortably in front of the cameras.
    pub(crate) fn two_frame_problem(
        rng: &mut ChaCha8Rng,
        gauge: GaugeMode,
    ) -> WindowProblem<f64> {
        let mut p = WindowProblem::new(gauge, test_camera(), Vector3::new(0.0, 0.0, -9.81));
        let pose0 = random_pose(rng, 0.5, 0.2);
        let mut pose1 = pose0.clone();
        pose1.trans += Vector3::new(rng.random_range(0.05..0.3), 0.0, 0.0);
        let vel = if gauge == GaugeMode::VioLike {
            Some(Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ))
        } else {
            None
        };
        p.frames.push(FrameState {
            id: FrameId(0),
            pose: pose0,
            vel,
            lin: None,
        });
        p.frames.push(FrameState {
            id: FrameId(1),
            pose: pose1,
            vel: vel.map(|v| v + Vector3::new(0.1, 0.0, 0.0)),
            lin: None,
        });
        p.landmarks.insert(
            LandmarkId(0),
            Landmark {
                id: LandmarkId(0),
                host: FrameId(0),
                bearing: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                inv_depth: 1.0 / rng.random_range(3.0..8.0),
            },
        );
        p
    }

    fn reprojection_block(
        problem: &WindowProblem<f64>,
        target: FrameId,
        cam: CameraSide,
        at_observed: bool,
    ) -> ResidualBlock<f64> {
        let mut block = ResidualBlock {
            kind: ResidualKind::Reprojection { cam },
            frames: vec![target],
            landmark: Some(LandmarkId(0)),
            measurement: vec![0.0, 0.0],
            weight_sqrt: vec![2.0, 2.0],
        };
        if at_observed {
            // Measurement exactly at the current projection.
            if let EvalResult::Valid(eval) = evaluate_residual(&block, problem).unwrap() {
                block.measurement = vec![
                    eval.residual[0] / block.weight_sqrt[0],
                    eval.residual[1] / block.weight_sqrt[1],
                ];
            } else {
                panic!("projection invalid in test setup");
            }
        }
        block
    }

    #[test]
    fn absolute_prior_at_measurement_gives_zero_residual_identity_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = two_frame_problem(&mut rng, GaugeMode::VoLike);
        let pose = &p.frames[0].pose;
        let omega = log_so3(&pose.rot);
        let block = ResidualBlock {
            kind: ResidualKind::AbsolutePrior,
            frames: vec![FrameId(0)],
            landmark: None,
            measurement: vec![
                pose.trans.x, pose.trans.y, pose.trans.z, omega.x, omega.y, omega.z,
            ],
            weight_sqrt: vec![1.0; 6],
        };
        let EvalResult::Valid(eval) = evaluate_residual(&block, &p).unwrap() else {
            panic!("invalid")
        };
        for v in &eval.residual {
            assert!(v.abs() < 1e-12);
        }
        let (_, j) = &eval.jacobians[0];
        for i in 0..6 {
            for k in 0..6 {
                let expect = if i == k { 1.0 } else { 0.0 };
                assert!((j[(i, k)] - expect).abs() < 1e-10, "({i},{k})");
            }
        }
    }

    #[test]
    fn reprojection_at_observed_pixel_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = two_frame_problem(&mut rng, GaugeMode::VoLike);
        let block = reprojection_block(&p, FrameId(1), CameraSide::Left, true);
        let EvalResult::Valid(eval) = evaluate_residual(&block, &p).unwrap() else {
            panic!("invalid")
        };
        for v in &eval.residual {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn behind_camera_flags_invalid_not_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = two_frame_problem(&mut rng, GaugeMode::VoLike);
        // Negative depth puts the point behind every camera.
        p.landmarks.get_mut(&LandmarkId(0)).unwrap().inv_depth = -0.5;
        let block = reprojection_block(&p, FrameId(1), CameraSide::Left, false);
        assert!(matches!(
            evaluate_residual(&block, &p).unwrap(),
            EvalResult::Invalid(_)
        ));
    }

    /// Central finite differences of the weighted residual in the local
    /// chart of every referenced variable.
    pub(crate) fn finite_difference_jacobian(
        problem: &WindowProblem<f64>,
        block: &ResidualBlock<f64>,
        var: VarRef,
        dim: usize,
    ) -> DenseMatrix<f64> {
        let h = 1e-6;
        let eval_res = |p: &WindowProblem<f64>| -> Vec<f64> {
            match evaluate_residual(block, p).unwrap() {
                EvalResult::Valid(e) => e.residual,
                EvalResult::Invalid(_) => panic!("block became invalid during FD"),
            }
        };
        let base = eval_res(problem);
        let mut j = DenseMatrix::<f64>::zeros(base.len(), dim);
        for k in 0..dim {
            let perturb = |sign: f64| -> Vec<f64> {
                let mut p = problem.clone();
                match var {
                    VarRef::Frame(id) => {
                        let mut delta = vec![0.0; p.gauge.frame_dim()];
                        delta[k] = sign * h;
                        let f = p.frame_mut(id).unwrap();
                        let new = f.current().retract(&delta);
                        f.pose = new.pose;
                        f.vel = new.vel;
                    }
                    VarRef::Landmark(id) => {
                        let lm = p.landmarks.get_mut(&id).unwrap();
                        match k {
                            0 => lm.bearing[0] += sign * h,
                            1 => lm.bearing[1] += sign * h,
                            _ => lm.inv_depth += sign * h,
                        }
                    }
                }
                eval_res(&p)
            };
            let plus = perturb(1.0);
            let minus = perturb(-1.0);
            for r in 0..base.len() {
                j[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        j
    }

    fn check_block_jacobians(problem: &WindowProblem<f64>, block: &ResidualBlock<f64>) {
        let EvalResult::Valid(eval) = evaluate_residual(block, problem).unwrap() else {
            panic!("invalid block in FD test")
        };
        for (var, j_analytic) in &eval.jacobians {
            let dim = match var {
                VarRef::Frame(_) => problem.gauge.frame_dim(),
                VarRef::Landmark(_) => 3,
            };
            let j_fd = finite_difference_jacobian(problem, block, *var, dim);
            let err = j_analytic.sub(&j_fd).frob_norm();
            let scale = j_analytic.frob_norm().max(1.0);
            assert!(
                err / scale <= 1e-5,
                "var {var:?}: rel err {:e}\nanalytic {j_analytic:?}\nfd {j_fd:?}",
                err / scale
            );
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..60 {
            let gauge = if trial % 2 == 0 {
                GaugeMode::VioLike
            } else {
                GaugeMode::VoLike
            };
            let p = two_frame_problem(&mut rng, gauge);

            for cam in [CameraSide::Left, CameraSide::Right] {
                for target in [FrameId(0), FrameId(1)] {
                    let block = reprojection_block(&p, target, cam, true);
                    check_block_jacobians(&p, &block);
                }
            }

            let n_meas = if gauge == GaugeMode::VioLike { 10 } else { 6 };
            let mut meas: Vec<f64> = (0..n_meas).map(|_| rng.random_range(-0.2..0.2)).collect();
            if gauge == GaugeMode::VioLike {
                meas[9] = 0.1; // dt
            }
            let n_rows = if gauge == GaugeMode::VioLike { 9 } else { 6 };
            let block = ResidualBlock {
                kind: ResidualKind::RelativeMotion,
                frames: vec![FrameId(0), FrameId(1)],
                landmark: None,
                measurement: meas,
                weight_sqrt: (0..n_rows).map(|_| rng.random_range(0.5..3.0)).collect(),
            };
            check_block_jacobians(&p, &block);

            let block = ResidualBlock {
                kind: ResidualKind::AbsolutePrior,
                frames: vec![FrameId(0)],
                landmark: None,
                measurement: (0..6).map(|_| rng.random_range(-0.3..0.3)).collect(),
                weight_sqrt: (0..6).map(|_| rng.random_range(0.5..3.0)).collect(),
            };
            check_block_jacobians(&p, &block);
        }
    }

    #[test]
    fn frozen_frames_keep_jacobians_while_residual_tracks_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = two_frame_problem(&mut rng, GaugeMode::VoLike);
        let block = reprojection_block(&p, FrameId(1), CameraSide::Left, true);
        p.frames[0].freeze();
        p.frames[1].freeze();
        let EvalResult::Valid(before) = evaluate_residual(&block, &p).unwrap() else {
            panic!()
        };
        // Move the current state; frozen Jacobians must be bit-identical.
        let delta = [0.01, -0.02, 0.005, 0.002, -0.001, 0.003];
        let f = p.frame_mut(FrameId(1)).unwrap();
        let new = f.current().retract(&delta);
        f.pose = new.pose;
        let EvalResult::Valid(after) = evaluate_residual(&block, &p).unwrap() else {
            panic!()
        };
        assert_ne!(before.residual, after.residual, "residual must move");
        for ((_, ja), (_, jb)) in before.jacobians.iter().zip(&after.jacobians) {
            assert_eq!(ja.data(), jb.data(), "jacobian must stay frozen");
        }
    }

    #[test]
    fn total_energy_trivial_and_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = two_frame_problem(&mut rng, GaugeMode::VoLike);
        assert_eq!(total_energy(&p).unwrap(), 0.0, "no residuals -> 0");

        let zero_block = reprojection_block(&p, FrameId(1), CameraSide::Left, true);
        p.residuals.push(zero_block);
        assert!(total_energy(&p).unwrap() < 1e-20, "zero-residual block -> 0");

        // Sum of half squared norms computed independently of the bookkeeping.
        for _ in 0..5 {
            let mut block = reprojection_block(&p, FrameId(1), CameraSide::Left, true);
            block.measurement[0] += rng.random_range(-2.0..2.0);
            block.measurement[1] += rng.random_range(-2.0..2.0);
            p.residuals.push(block);
        }
        let mut brute = 0.0;
        for b in &p.residuals {
            if let EvalResult::Valid(e) = evaluate_residual(b, &p).unwrap() {
                brute += 0.5 * e.residual.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let total = total_energy(&p).unwrap();
        assert!((total - brute).abs() <= 1e-12 * brute.max(1.0));
    }

    #[test]
    fn energy_is_invariant_under_partition_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = two_frame_problem(&mut rng, GaugeMode::VoLike);
        let mut block = reprojection_block(&p, FrameId(1), CameraSide::Left, true);
        block.measurement[0] += 1.5;
        p.residuals.push(block);
        let e0 = total_energy(&p).unwrap();
        let mut classes = BTreeMap::new();
        classes.insert(FrameId(0), VarClass::Marginalized);
        classes.insert(FrameId(1), VarClass::Connected);
        p.partition = Some(Partition::new(classes));
        let e1 = total_energy(&p).unwrap();
        assert_eq!(e0, e1);
    }
}
