//! Versioned JSON fixtures: window problems, marginalization priors and
//! synthetic worlds. Matrices are listed row-major with an explicit
//! precision tag; every document carries a `schema_version`.

use crate::geometry::{quaternion_to_rotation, rotation_to_quaternion, Pose};
use crate::linalg::{DenseMatrix, Scalar};
use crate::marg::{MarginalizationPrior, PriorForm};
use crate::problem::{
    FrameId, FrameLin, FrameState, GaugeMode, Landmark, LandmarkId, ResidualBlock, ResidualKind,
    StereoCamera, WindowProblem,
};
use crate::sim::{FrameObservations, SyntheticWorld, TruthState, WorldLandmark};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    Version(u32),
    #[error("inconsistent snapshot: {0}")]
    Inconsistent(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixSnapshot {
    pub rows: usize,
    pub cols: usize,
    pub precision: String,
    /// Row-major entries.
    pub entries: Vec<f64>,
}

impl MatrixSnapshot {
    pub fn from_matrix<S: Scalar>(m: &DenseMatrix<S>) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            precision: S::LABEL.to_string(),
            entries: m.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_matrix<S: Scalar>(&self) -> Result<DenseMatrix<S>, SnapshotError> {
        if self.entries.len() != self.rows * self.cols {
            return Err(SnapshotError::Inconsistent(format!(
                "matrix {}x{} with {} entries",
                self.rows,
                self.cols,
                self.entries.len()
            )));
        }
        let cast: Vec<S> = self.entries.iter().map(|v| S::of_f64(*v)).collect();
        Ok(DenseMatrix::from_row_slice(self.rows, self.cols, &cast))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseSnapshot {
    pub t: [f64; 3],
    /// Quaternion (qx, qy, qz, qw).
    pub q: [f64; 4],
}

impl PoseSnapshot {
    pub fn from_pose<S: Scalar>(p: &Pose<S>) -> Self {
        let p64 = p.to_f64();
        Self {
            t: [p64.trans.x, p64.trans.y, p64.trans.z],
            q: rotation_to_quaternion(&p64.rot),
        }
    }

    pub fn to_pose<S: Scalar>(&self) -> Pose<S> {
        let rot = quaternion_to_rotation(&self.q);
        Pose::new(rot, Vector3::new(self.t[0], self.t[1], self.t[2])).cast()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameLinSnapshot {
    pub pose: PoseSnapshot,
    pub vel: Option<[f64; 3]>,
}

impl FrameLinSnapshot {
    fn from_lin<S: Scalar>(lin: &FrameLin<S>) -> Self {
        Self {
            pose: PoseSnapshot::from_pose(&lin.pose),
            vel: lin.vel.map(|v| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()]),
        }
    }

    fn to_lin<S: Scalar>(&self) -> FrameLin<S> {
        FrameLin {
            pose: self.pose.to_pose(),
            vel: self
                .vel
                .map(|v| Vector3::new(S::of_f64(v[0]), S::of_f64(v[1]), S::of_f64(v[2]))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorSnapshot {
    pub schema_version: u32,
    pub precision: String,
    pub form: String,
    pub variable_index: Vec<(u64, usize)>,
    pub matrix: MatrixSnapshot,
    pub vector: Vec<f64>,
    pub lin_point: Vec<(u64, FrameLinSnapshot)>,
}

impl PriorSnapshot {
    pub fn from_prior<S: Scalar>(prior: &MarginalizationPrior<S>) -> Self {
        let (form, matrix, vector) = match &prior.form {
            PriorForm::Squared { h, b } => (
                "squared",
                MatrixSnapshot::from_matrix(h),
                b.iter().map(|v| v.as_f64()).collect(),
            ),
            PriorForm::Sqrt { j, r } => (
                "sqrt",
                MatrixSnapshot::from_matrix(j),
                r.iter().map(|v| v.as_f64()).collect(),
            ),
        };
        Self {
            schema_version: SCHEMA_VERSION,
            precision: S::LABEL.to_string(),
            form: form.to_string(),
            variable_index: prior.variable_index.iter().map(|(f, d)| (f.0, *d)).collect(),
            matrix,
            vector,
            lin_point: prior
                .lin_point
                .iter()
                .map(|(id, lin)| (id.0, FrameLinSnapshot::from_lin(lin)))
                .collect(),
        }
    }

    pub fn to_prior<S: Scalar>(&self) -> Result<MarginalizationPrior<S>, SnapshotError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SnapshotError::Version(self.schema_version));
        }
        let m = self.matrix.to_matrix::<S>()?;
        let v: Vec<S> = self.vector.iter().map(|x| S::of_f64(*x)).collect();
        let form = match self.form.as_str() {
            "squared" => PriorForm::Squared { h: m, b: v },
            "sqrt" => PriorForm::Sqrt { j: m, r: v },
            other => {
                return Err(SnapshotError::Inconsistent(format!(
                    "unknown prior form '{other}'"
                )))
            }
        };
        Ok(MarginalizationPrior {
            form,
            variable_index: self
                .variable_index
                .iter()
                .map(|(f, d)| (FrameId(*f), *d))
                .collect(),
            lin_point: self
                .lin_point
                .iter()
                .map(|(id, lin)| (FrameId(*id), lin.to_lin()))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameSnapshot {
    pub id: u64,
    pub pose: PoseSnapshot,
    pub vel: Option<[f64; 3]>,
    pub lin: Option<FrameLinSnapshot>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LandmarkSnapshot {
    pub id: u64,
    pub host: u64,
    pub bearing: [f64; 2],
    pub inv_depth: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualSnapshot {
    pub kind: ResidualKind,
    pub frames: Vec<u64>,
    pub landmark: Option<u64>,
    pub measurement: Vec<f64>,
    pub weight_sqrt: Vec<f64>,
}

/// Serializable view of a whole window problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemSnapshot {
    pub schema_version: u32,
    pub precision: String,
    pub gauge: GaugeMode,
    pub camera: StereoCamera<f64>,
    pub gravity: [f64; 3],
    pub frames: Vec<FrameSnapshot>,
    pub landmarks: Vec<LandmarkSnapshot>,
    pub residuals: Vec<ResidualSnapshot>,
    pub prior: PriorSnapshot,
}

impl ProblemSnapshot {
    pub fn from_problem<S: Scalar>(p: &WindowProblem<S>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            precision: S::LABEL.to_string(),
            gauge: p.gauge,
            camera: p.camera.cast(),
            gravity: [
                p.gravity.x.as_f64(),
                p.gravity.y.as_f64(),
                p.gravity.z.as_f64(),
            ],
            frames: p
                .frames
                .iter()
                .map(|f| FrameSnapshot {
                    id: f.id.0,
                    pose: PoseSnapshot::from_pose(&f.pose),
                    vel: f.vel.map(|v| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()]),
                    lin: f.lin.as_ref().map(FrameLinSnapshot::from_lin),
                })
                .collect(),
            landmarks: p
                .landmarks
                .values()
                .map(|lm| LandmarkSnapshot {
                    id: lm.id.0,
                    host: lm.host.0,
                    bearing: [lm.bearing[0].as_f64(), lm.bearing[1].as_f64()],
                    inv_depth: lm.inv_depth.as_f64(),
                })
                .collect(),
            residuals: p
                .residuals
                .iter()
                .map(|rb| ResidualSnapshot {
                    kind: rb.kind,
                    frames: rb.frames.iter().map(|f| f.0).collect(),
                    landmark: rb.landmark.map(|l| l.0),
                    measurement: rb.measurement.iter().map(|v| v.as_f64()).collect(),
                    weight_sqrt: rb.weight_sqrt.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            prior: PriorSnapshot::from_prior(&p.prior),
        }
    }

    pub fn to_problem<S: Scalar>(&self) -> Result<WindowProblem<S>, SnapshotError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SnapshotError::Version(self.schema_version));
        }
        let mut problem = WindowProblem::new(
            self.gauge,
            self.camera.cast(),
            Vector3::new(
                S::of_f64(self.gravity[0]),
                S::of_f64(self.gravity[1]),
                S::of_f64(self.gravity[2]),
            ),
        );
        for f in &self.frames {
            problem.frames.push(FrameState {
                id: FrameId(f.id),
                pose: f.pose.to_pose(),
                vel: f
                    .vel
                    .map(|v| Vector3::new(S::of_f64(v[0]), S::of_f64(v[1]), S::of_f64(v[2]))),
                lin: f.lin.as_ref().map(|l| l.to_lin()),
            });
        }
        for lm in &self.landmarks {
            problem.landmarks.insert(
                LandmarkId(lm.id),
                Landmark {
                    id: LandmarkId(lm.id),
                    host: FrameId(lm.host),
                    bearing: [S::of_f64(lm.bearing[0]), S::of_f64(lm.bearing[1])],
                    inv_depth: S::of_f64(lm.inv_depth),
                },
            );
        }
        for rb in &self.residuals {
            problem.residuals.push(ResidualBlock {
                kind: rb.kind,
                frames: rb.frames.iter().map(|f| FrameId(*f)).collect(),
                landmark: rb.landmark.map(LandmarkId),
                measurement: rb.measurement.iter().map(|v| S::of_f64(*v)).collect(),
                weight_sqrt: rb.weight_sqrt.iter().map(|v| S::of_f64(*v)).collect(),
            });
        }
        problem.prior = self.prior.to_prior()?;
        Ok(problem)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthSnapshot {
    pub timestamp: f64,
    pub pose: PoseSnapshot,
    pub vel: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldLandmarkSnapshot {
    pub id: u64,
    pub position: [f64; 3],
    pub spawn_frame: usize,
    pub end_frame: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameStreamSnapshot {
    pub index: usize,
    pub timestamp: f64,
    pub observations: Vec<crate::sim::ObservedLandmark>,
    pub odometry: Option<crate::sim::OdometryMeasurement>,
    pub init: Option<(PoseSnapshot, [f64; 3])>,
}

/// Serializable synthetic world (parameters, truth and the full stream).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub schema_version: u32,
    pub params: crate::sim::WorldParams,
    pub truth: Vec<TruthSnapshot>,
    pub landmarks: Vec<WorldLandmarkSnapshot>,
    pub frames: Vec<FrameStreamSnapshot>,
}

impl WorldSnapshot {
    pub fn from_world(w: &SyntheticWorld) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            params: w.params.clone(),
            truth: w
                .truth
                .iter()
                .enumerate()
                .map(|(k, t)| TruthSnapshot {
                    timestamp: k as f64 * w.params.dt,
                    pose: PoseSnapshot::from_pose(&t.pose),
                    vel: [t.vel.x, t.vel.y, t.vel.z],
                })
                .collect(),
            landmarks: w
                .landmarks
                .iter()
                .map(|lm| WorldLandmarkSnapshot {
                    id: lm.id.0,
                    position: [lm.position.x, lm.position.y, lm.position.z],
                    spawn_frame: lm.spawn_frame,
                    end_frame: lm.end_frame,
                })
                .collect(),
            frames: w
                .frames
                .iter()
                .map(|f| FrameStreamSnapshot {
                    index: f.index,
                    timestamp: f.timestamp,
                    observations: f.observations.clone(),
                    odometry: f.odometry.clone(),
                    init: f
                        .init
                        .as_ref()
                        .map(|(p, v)| (PoseSnapshot::from_pose(p), [v.x, v.y, v.z])),
                })
                .collect(),
        }
    }

    pub fn to_world(&self) -> Result<SyntheticWorld, SnapshotError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SnapshotError::Version(self.schema_version));
        }
        Ok(SyntheticWorld {
            params: self.params.clone(),
            truth: self
                .truth
                .iter()
                .map(|t| TruthState {
                    pose: t.pose.to_pose(),
                    vel: Vector3::new(t.vel[0], t.vel[1], t.vel[2]),
                })
                .collect(),
            landmarks: self
                .landmarks
                .iter()
                .map(|lm| WorldLandmark {
                    id: LandmarkId(lm.id),
                    position: Vector3::new(lm.position[0], lm.position[1], lm.position[2]),
                    spawn_frame: lm.spawn_frame,
                    end_frame: lm.end_frame,
                })
                .collect(),
            frames: self
                .frames
                .iter()
                .map(|f| FrameObservations {
                    index: f.index,
                    timestamp: f.timestamp,
                    observations: f.observations.clone(),
                    odometry: f.odometry.clone(),
                    init: f
                        .init
                        .as_ref()
                        .map(|(p, v)| (p.to_pose(), Vector3::new(v[0], v[1], v[2]))),
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{MargBackend, OptBackend, SlidingEstimator, SolverConfig};
    use crate::sim::{generate_world, TrajectoryPreset, WorldParams};

    fn sample_problem() -> WindowProblem<f64> {
        let params =
            WorldParams::preset_defaults(TrajectoryPreset::Circle, GaugeMode::VioLike, 5);
        let world = generate_world(&params).unwrap();
        let config = SolverConfig::new(OptBackend::NsLdlt, MargBackend::NsQr, GaugeMode::VioLike);
        let mut est = SlidingEstimator::<f64>::new(&params, config, 5);
        for frame in world.frames.iter().take(10) {
            est.process_frame(frame).unwrap();
        }
        est.problem
    }

    #[test]
    fn problem_snapshot_roundtrip() {
        let problem = sample_problem();
        let snap = ProblemSnapshot::from_problem(&problem);
        assert_eq!(snap.schema_version, SCHEMA_VERSION);
        assert_eq!(snap.precision, "f64");
        let json = serde_json::to_string(&snap).unwrap();
        let back: ProblemSnapshot = serde_json::from_str(&json).unwrap();
        let restored: WindowProblem<f64> = back.to_problem().unwrap();
        assert_eq!(restored.frames.len(), problem.frames.len());
        assert_eq!(restored.landmarks.len(), problem.landmarks.len());
        assert_eq!(restored.residuals.len(), problem.residuals.len());
        for (a, b) in problem.frames.iter().zip(&restored.frames) {
            assert!((a.pose.trans - b.pose.trans).norm() < 1e-12);
            assert!((a.pose.rot - b.pose.rot).norm() < 1e-12);
            assert_eq!(a.lin.is_some(), b.lin.is_some());
        }
        // Energies agree through the roundtrip.
        let e0 = crate::problem::total_energy(&problem).unwrap();
        let e1 = crate::problem::total_energy(&restored).unwrap();
        assert!((e0 - e1).abs() <= 1e-9 * e0.abs().max(1.0));
    }

    #[test]
    fn prior_snapshot_keeps_precision_tag_and_form() {
        let problem = sample_problem();
        let snap = PriorSnapshot::from_prior(&problem.prior);
        assert_eq!(snap.form, "sqrt");
        assert_eq!(snap.precision, "f64");
        let as_f32: MarginalizationPrior<f32> = snap.to_prior().unwrap();
        assert_eq!(as_f32.dim(), problem.prior.dim());

        let bad = PriorSnapshot {
            schema_version: 99,
            ..snap
        };
        assert!(matches!(
            bad.to_prior::<f64>(),
            Err(SnapshotError::Version(99))
        ));
    }

    #[test]
    fn world_snapshot_roundtrip_preserves_stream() {
        let mut params =
            WorldParams::preset_defaults(TrajectoryPreset::FigureEight, GaugeMode::VoLike, 11);
        params.n_frames = 8;
        let world = generate_world(&params).unwrap();
        let snap = WorldSnapshot::from_world(&world);
        let json = serde_json::to_string(&snap).unwrap();
        let back: WorldSnapshot = serde_json::from_str(&json).unwrap();
        let restored = back.to_world().unwrap();
        assert_eq!(restored.frames.len(), world.frames.len());
        for (a, b) in world.frames.iter().zip(&restored.frames) {
            assert_eq!(a.observations.len(), b.observations.len());
            for (oa, ob) in a.observations.iter().zip(&b.observations) {
                assert_eq!(oa.uv, ob.uv);
            }
        }
    }
}
