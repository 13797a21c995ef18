//! Synthetic world generation: ground-truth trajectories, landmarks sampled
//! in the cameras' view, and noisy observation/odometry streams. Identical
//! seed and parameters produce bit-identical worlds.

use crate::geometry::{exp_so3, Pose};
use crate::problem::{CameraSide, GaugeMode, LandmarkId, StereoCamera};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrajectoryPreset {
    Circle,
    FigureEight,
    RandomWalk,
}

impl std::str::FromStr for TrajectoryPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "circle" => Ok(Self::Circle),
            "figure8" => Ok(Self::FigureEight),
            "randomwalk" => Ok(Self::RandomWalk),
            other => Err(format!("unknown preset '{other}' (circle|figure8|randomwalk)")),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct WorldParams {
    pub preset: TrajectoryPreset,
    pub n_frames: usize,
    pub dt: f64,
    pub seed: u64,
    pub gauge: GaugeMode,
    /// Pixel observation noise (standard deviation).
    pub obs_noise_px: f64,
    /// Odometry noise per component: rotation (rad), position (m),
    /// velocity (m/s; inertial mode only).
    pub rel_noise_rot: f64,
    pub rel_noise_pos: f64,
    pub rel_noise_vel: f64,
    pub landmarks_per_frame: usize,
    pub track_min: usize,
    pub track_max: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Probability that a non-spawn right-camera observation is dropped.
    pub right_dropout: f64,
    pub camera: StereoCamera<f64>,
    pub gravity: [f64; 3],
}

impl WorldParams {
    pub fn preset_defaults(preset: TrajectoryPreset, gauge: GaugeMode, seed: u64) -> Self {
        Self {
            preset,
            n_frames: 60,
            dt: 0.1,
            seed,
            gauge,
            obs_noise_px: 0.5,
            rel_noise_rot: 1e-3,
            rel_noise_pos: 2e-3,
            rel_noise_vel: 2e-3,
            landmarks_per_frame: 8,
            track_min: 4,
            track_max: 9,
            depth_min: 3.0,
            depth_max: 12.0,
            right_dropout: 0.05,
            camera: StereoCamera {
                fx: 450.0,
                fy: 450.0,
                cx: 320.0,
                cy: 240.0,
                baseline: 0.12,
                width: 640.0,
                height: 480.0,
            },
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TruthState {
    pub pose: Pose<f64>,
    pub vel: Vector3<f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ObservedLandmark {
    pub id: LandmarkId,
    pub cam: CameraSide,
    pub uv: [f64; 2],
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct OdometryMeasurement {
    pub dp: [f64; 3],
    pub omega: [f64; 3],
    pub dv: [f64; 3],
    pub dt: f64,
}

/// Everything the estimator sees for one incoming frame.
#[derive(Clone, Debug)]
pub struct FrameObservations {
    pub index: usize,
    pub timestamp: f64,
    pub observations: Vec<ObservedLandmark>,
    /// Odometry from the previous frame; `None` for the first.
    pub odometry: Option<OdometryMeasurement>,
    /// Initial state hint, first frame only.
    pub init: Option<(Pose<f64>, Vector3<f64>)>,
}

#[derive(Clone, Debug)]
pub struct WorldLandmark {
    pub id: LandmarkId,
    pub position: Vector3<f64>,
    pub spawn_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub params: WorldParams,
    pub truth: Vec<TruthState>,
    pub landmarks: Vec<WorldLandmark>,
    pub frames: Vec<FrameObservations>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible geometry: frame {0} has no visible landmarks")]
    InfeasibleGeometry(usize),
}

fn truth_pose(preset: TrajectoryPreset, t: f64, rng_walk: &mut Option<Vec<Pose<f64>>>) -> Pose<f64> {
    match preset {
        TrajectoryPreset::Circle => {
            let radius = 6.0;
            let omega = 0.25;
            let a = omega * t;
            let pos = Vector3::new(radius * a.cos(), radius * a.sin(), 0.6 * (0.5 * a).sin());
            let yaw = a + std::f64::consts::FRAC_PI_2;
            let pitch = 0.12 * (0.4 * a).sin();
            let roll = 0.10 * (0.7 * a).sin();
            let rot = exp_so3(&Vector3::new(0.0, 0.0, yaw))
                * exp_so3(&Vector3::new(0.0, pitch, 0.0))
                * exp_so3(&Vector3::new(roll, 0.0, 0.0));
            Pose::new(rot, pos)
        }
        TrajectoryPreset::FigureEight => {
            let scale = 5.0;
            let omega = 0.2;
            let a = omega * t;
            let pos = Vector3::new(
                scale * a.sin(),
                scale * a.sin() * a.cos(),
                0.4 * (0.9 * a).sin(),
            );
            let yaw = (a.cos().powi(2) - a.sin().powi(2)).atan2(a.cos()) ;
            let pitch = 0.1 * (0.5 * a).cos();
            let roll = 0.08 * (0.3 * a).sin();
            let rot = exp_so3(&Vector3::new(0.0, 0.0, yaw))
                * exp_so3(&Vector3::new(0.0, pitch, 0.0))
                * exp_so3(&Vector3::new(roll, 0.0, 0.0));
            Pose::new(rot, pos)
        }
        TrajectoryPreset::RandomWalk => {
            // Poses are pre-integrated once; index by step.
            let walk = rng_walk.as_ref().expect("random walk not initialized");
            let k = (t / 0.1).round() as usize;
            walk[k.min(walk.len() - 1)].clone()
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Deterministic synthetic world: ground-truth states, landmark tracks and
/// the per-frame observation/odometry stream.
pub fn generate_world(params: &WorldParams) -> Result<SyntheticWorld, SimError> {
    if params.n_frames < 2 {
        return Err(SimError::InvalidParameter("need at least 2 frames".into()));
    }
    if params.track_min < 2 || params.track_max < params.track_min {
        return Err(SimError::InvalidParameter(
            "track length range must satisfy 2 <= min <= max".into(),
        ));
    }
    if params.depth_min <= 0.0 || params.depth_max <= params.depth_min {
        return Err(SimError::InvalidParameter("bad depth range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // Random-walk trajectories integrate small random twists.
    let mut walk = None;
    if params.preset == TrajectoryPreset::RandomWalk {
        let mut poses = Vec::with_capacity(params.n_frames);
        let mut cur = Pose::<f64>::identity();
        let mut twist = [0.12, 0.02, 0.0, 0.0, 0.0, 0.02];
        for _ in 0..params.n_frames {
            poses.push(cur.clone());
            for (k, t) in twist.iter_mut().enumerate() {
                let sigma = if k < 3 { 0.02 } else { 0.008 };
                *t = 0.95 * *t + normal(&mut rng, sigma);
            }
            cur = cur.retract(&twist);
        }
        walk = Some(poses);
    }

    // Ground-truth states, normalized so the first pose is the identity.
    let raw: Vec<Pose<f64>> = (0..params.n_frames)
        .map(|k| truth_pose(params.preset, k as f64 * params.dt, &mut walk))
        .collect();
    let base_inv = raw[0].inverse();
    let poses: Vec<Pose<f64>> = raw.iter().map(|p| base_inv.compose(p)).collect();
    let mut truth: Vec<TruthState> = Vec::with_capacity(params.n_frames);
    for k in 0..params.n_frames {
        let next = poses.get(k + 1).unwrap_or(&poses[k]);
        let prev = if k + 1 < poses.len() { &poses[k] } else { &poses[k - 1] };
        let vel = (next.trans - prev.trans) / params.dt;
        truth.push(TruthState {
            pose: poses[k].clone(),
            vel,
        });
    }

    let gravity = Vector3::new(params.gravity[0], params.gravity[1], params.gravity[2]);
    let cam = &params.camera;
    let margin = 12.0;

    // Landmark tracks: spawned per frame inside the spawning frame's view.
    let mut landmarks: Vec<WorldLandmark> = Vec::new();
    let mut next_id = 0u64;
    for k in 0..params.n_frames {
        for _ in 0..params.landmarks_per_frame {
            let mut placed = false;
            for _attempt in 0..40 {
                let u = rng.random_range(margin..cam.width - margin);
                let v = rng.random_range(margin..cam.height - margin);
                let depth = params.depth_min
                    * (params.depth_max / params.depth_min).powf(rng.random_range(0.0..1.0));
                let p_cam = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0) * depth;
                let p_world = truth[k].pose.transform(&p_cam);
                // Spawn requires a valid stereo pair in the host frame.
                let p_right = p_cam - Vector3::new(cam.baseline, 0.0, 0.0);
                let (Some(uv_l), Some(uv_r)) = (cam.project(&p_cam), cam.project(&p_right)) else {
                    continue;
                };
                if !cam.in_image(&uv_l, margin) || !cam.in_image(&uv_r, margin) {
                    continue;
                }
                let track = rng.random_range(params.track_min..=params.track_max);
                landmarks.push(WorldLandmark {
                    id: LandmarkId(next_id),
                    position: p_world,
                    spawn_frame: k,
                    end_frame: (k + track).min(params.n_frames),
                });
                next_id += 1;
                placed = true;
                break;
            }
            if !placed {
                return Err(SimError::InfeasibleGeometry(k));
            }
        }
    }

    // Observation + odometry stream.
    let mut frames = Vec::with_capacity(params.n_frames);
    for k in 0..params.n_frames {
        let pose = &truth[k].pose;
        let inv = pose.inverse();
        let mut observations = Vec::new();
        for lm in &landmarks {
            if k < lm.spawn_frame || k >= lm.end_frame {
                continue;
            }
            let p_cam = inv.transform(&lm.position);
            let p_right = p_cam - Vector3::new(cam.baseline, 0.0, 0.0);
            let left = cam.project(&p_cam).filter(|uv| cam.in_image(uv, 2.0));
            let right = cam.project(&p_right).filter(|uv| cam.in_image(uv, 2.0));
            let Some(uv_l) = left else { continue };
            observations.push(ObservedLandmark {
                id: lm.id,
                cam: CameraSide::Left,
                uv: [
                    uv_l[0] + normal(&mut rng, params.obs_noise_px),
                    uv_l[1] + normal(&mut rng, params.obs_noise_px),
                ],
            });
            let keep_right = k == lm.spawn_frame || rng.random_range(0.0..1.0) >= params.right_dropout;
            if let Some(uv_r) = right {
                if keep_right {
                    observations.push(ObservedLandmark {
                        id: lm.id,
                        cam: CameraSide::Right,
                        uv: [
                            uv_r[0] + normal(&mut rng, params.obs_noise_px),
                            uv_r[1] + normal(&mut rng, params.obs_noise_px),
                        ],
                    });
                }
            }
        }
        if observations.is_empty() {
            return Err(SimError::InfeasibleGeometry(k));
        }

        let odometry = if k == 0 {
            None
        } else {
            let prev = &truth[k - 1];
            let curr = &truth[k];
            let rit = prev.pose.rot.transpose();
            let dt = params.dt;
            let omega_true = crate::geometry::log_so3(&(rit * curr.pose.rot));
            let (dp_true, dv_true) = match params.gauge {
                GaugeMode::VioLike => (
                    rit * (curr.pose.trans
                        - prev.pose.trans
                        - prev.vel * dt
                        - gravity * (0.5 * dt * dt)),
                    rit * (curr.vel - prev.vel - gravity * dt),
                ),
                GaugeMode::VoLike => (rit * (curr.pose.trans - prev.pose.trans), Vector3::zeros()),
            };
            Some(OdometryMeasurement {
                dp: [
                    dp_true.x + normal(&mut rng, params.rel_noise_pos),
                    dp_true.y + normal(&mut rng, params.rel_noise_pos),
                    dp_true.z + normal(&mut rng, params.rel_noise_pos),
                ],
                omega: [
                    omega_true.x + normal(&mut rng, params.rel_noise_rot),
                    omega_true.y + normal(&mut rng, params.rel_noise_rot),
                    omega_true.z + normal(&mut rng, params.rel_noise_rot),
                ],
                dv: [
                    dv_true.x + normal(&mut rng, params.rel_noise_vel),
                    dv_true.y + normal(&mut rng, params.rel_noise_vel),
                    dv_true.z + normal(&mut rng, params.rel_noise_vel),
                ],
                dt,
            })
        };

        frames.push(FrameObservations {
            index: k,
            timestamp: k as f64 * params.dt,
            observations,
            odometry,
            init: (k == 0).then(|| (truth[0].pose.clone(), truth[0].vel)),
        });
    }

    Ok(SyntheticWorld {
        params: params.clone(),
        truth,
        landmarks,
        frames,
    })
}
