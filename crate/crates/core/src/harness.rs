//! Experiment orchestration over the backend/precision variant matrix:
//! full runs producing trajectory files, diagnostics CSVs, JSON-lines event
//! logs and summaries, plus the mechanical consistency checks over a
//! produced report bundle. All randomness flows from the single run seed;
//! re-runs produce byte-identical bundles (wall-clock timings live in a
//! separate file excluded from that guarantee).

use crate::estimator::{
    EstimatorError, MargBackend, OptBackend, SlidingEstimator, SolverConfig,
};
use crate::eval::{
    ate_rmse, diagnostics_csv_row, format_trajectory, parse_trajectory, DiagnosticsRecord,
    DIAGNOSTICS_CSV_HEADER,
};
use crate::geometry::Pose;
use crate::linalg::Scalar;
use crate::sim::{generate_world, SimError, SyntheticWorld, WorldParams};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn label(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

/// One cell of the backend/precision matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub opt: OptBackend,
    pub marg: MargBackend,
    pub precision: Precision,
}

impl VariantSpec {
    pub fn name(&self) -> String {
        let opt = match self.opt {
            OptBackend::NsLdlt => "ns_ldlt",
            OptBackend::ScLdlt => "sc_ldlt",
        };
        let marg = match self.marg {
            MargBackend::NsQr => "ns_qr",
            MargBackend::ScSc => "sc_sc",
        };
        format!("{opt}-{marg}-{}", self.precision.label())
    }

    /// All eight valid combinations.
    pub fn all() -> Vec<VariantSpec> {
        let mut out = Vec::new();
        for opt in [OptBackend::NsLdlt, OptBackend::ScLdlt] {
            for marg in [MargBackend::NsQr, MargBackend::ScSc] {
                for precision in [Precision::Double, Precision::Single] {
                    out.push(VariantSpec {
                        opt,
                        marg,
                        precision,
                    });
                }
            }
        }
        out
    }
}

impl std::str::FromStr for VariantSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(format!(
                "variant '{s}' must look like ns_ldlt-ns_qr-f64"
            ));
        }
        let opt = match parts[0] {
            "ns_ldlt" => OptBackend::NsLdlt,
            "sc_ldlt" => OptBackend::ScLdlt,
            other => return Err(format!("unknown optimization backend '{other}'")),
        };
        let marg = match parts[1] {
            "ns_qr" => MargBackend::NsQr,
            "sc_sc" => MargBackend::ScSc,
            other => return Err(format!("unknown marginalization backend '{other}'")),
        };
        let precision = match parts[2] {
            "f32" => Precision::Single,
            "f64" => Precision::Double,
            other => return Err(format!("unknown precision '{other}'")),
        };
        Ok(VariantSpec {
            opt,
            marg,
            precision,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub world: WorldParams,
    pub solver: SolverConfig,
    pub variants: Vec<VariantSpec>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("json in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid variant list: every entry must be one of the 8 valid combinations")]
    InvalidVariants,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventRecord {
    Step {
        frame: usize,
        accepted: bool,
        energy_before: f64,
        energy_after: f64,
        lambda: f64,
        rejected_trials: usize,
        solver_failures: usize,
    },
    Marginalization {
        frame: usize,
        event_index: usize,
        removed_frame: u64,
        dead_landmarks: usize,
        dropped_active_observations: usize,
        input_rows: usize,
        keep_dim: usize,
        pseudo_fallback: bool,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailureInfo {
    pub frame: usize,
    pub event_index: usize,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub optimize_s: f64,
    pub marginalize_s: f64,
}

/// In-memory output of one variant run.
pub struct VariantOutput {
    pub spec: VariantSpec,
    pub trajectory: Vec<(f64, Pose<f64>)>,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub events: Vec<EventRecord>,
    pub ate: Option<f64>,
    pub failure: Option<FailureInfo>,
    pub timings: PhaseTimings,
}

/// Deterministic per-variant summary (timings excluded).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub ate: Option<f64>,
    pub failed: bool,
    pub failure: Option<FailureInfo>,
    pub frames: usize,
    pub marg_events: usize,
    pub final_prior_rank: Option<usize>,
    pub min_sigma_min: Option<f64>,
    pub max_abs_gauge_probe: Option<f64>,
}

fn run_loop<S: Scalar>(world: &SyntheticWorld, config: SolverConfig, seed: u64) -> VariantOutput {
    let spec = VariantSpec {
        opt: config.opt_backend,
        marg: config.marg_backend,
        precision: if S::LABEL == "f32" {
            Precision::Single
        } else {
            Precision::Double
        },
    };
    let mut est = SlidingEstimator::<S>::new(&world.params, config, seed);
    let mut events = Vec::new();
    let mut diagnostics = Vec::new();
    let mut timings = PhaseTimings::default();
    let mut failure = None;

    for frame in &world.frames {
        match est.process_frame(frame) {
            Ok(report) => {
                timings.optimize_s += report.optimize_seconds;
                timings.marginalize_s += report.marginalize_seconds;
                for s in &report.steps {
                    events.push(EventRecord::Step {
                        frame: frame.index,
                        accepted: s.accepted,
                        energy_before: s.energy_before,
                        energy_after: s.energy_after,
                        lambda: s.lambda,
                        rejected_trials: s.rejected_trials,
                        solver_failures: s.solver_failures,
                    });
                }
                if let Some((m, d)) = report.marg {
                    events.push(EventRecord::Marginalization {
                        frame: frame.index,
                        event_index: m.event_index,
                        removed_frame: m.removed_frame,
                        dead_landmarks: m.dead_landmarks,
                        dropped_active_observations: m.dropped_active_observations,
                        input_rows: m.input_rows,
                        keep_dim: m.keep_dim,
                        pseudo_fallback: m.pseudo_fallback,
                    });
                    diagnostics.push(d);
                }
            }
            Err(e) => {
                let reason = match &e {
                    EstimatorError::NonFiniteEnergy(_) => "non-finite energy".to_string(),
                    EstimatorError::SolveFailedAtMaxDamping => {
                        "reduced-system factorization failed at damping limit".to_string()
                    }
                    other => other.to_string(),
                };
                failure = Some(FailureInfo {
                    frame: frame.index,
                    event_index: diagnostics.len(),
                    reason,
                });
                break;
            }
        }
    }

    let trajectory: Vec<(f64, Pose<f64>)> = est
        .full_trajectory()
        .into_iter()
        .map(|t| (t.timestamp, t.pose))
        .collect();
    let ate = if failure.is_none() {
        let truth: Vec<Pose<f64>> = world.truth.iter().map(|t| t.pose.clone()).collect();
        let est_poses: Vec<Pose<f64>> = trajectory.iter().map(|(_, p)| p.clone()).collect();
        ate_rmse(&est_poses, &truth).ok()
    } else {
        None
    };

    VariantOutput {
        spec,
        trajectory,
        diagnostics,
        events,
        ate,
        failure,
        timings,
    }
}

/// Runs one variant of the matrix on a pre-generated world.
pub fn run_variant(world: &SyntheticWorld, base: &SolverConfig, spec: VariantSpec, seed: u64) -> VariantOutput {
    let mut config = base.clone();
    config.opt_backend = spec.opt;
    config.marg_backend = spec.marg;
    config.gauge_mode = world.params.gauge;
    match spec.precision {
        Precision::Double => run_loop::<f64>(world, config, seed),
        Precision::Single => run_loop::<f32>(world, config, seed),
    }
}

fn variant_summary(out: &VariantOutput, world_frames: usize) -> VariantSummary {
    let min_sigma = out
        .diagnostics
        .iter()
        .filter_map(|d| d.sigma_min)
        .fold(None, |acc: Option<f64>, v| {
            Some(acc.map_or(v, |a| a.min(v)))
        });
    let gauge_mode = None::<()>; // labels live in the diagnostics themselves
    let _ = gauge_mode;
    let max_gauge = out
        .diagnostics
        .iter()
        .map(|d| {
            let p = &d.probes;
            [p.tx, p.ty, p.tz, p.yaw]
                .into_iter()
                .map(f64::abs)
                .fold(0.0, f64::max)
        })
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    VariantSummary {
        variant: out.spec.name(),
        ate: out.ate,
        failed: out.failure.is_some(),
        failure: out.failure.clone(),
        frames: world_frames,
        marg_events: out.diagnostics.len(),
        final_prior_rank: out.diagnostics.last().map(|d| d.prior_rank),
        min_sigma_min: min_sigma,
        max_abs_gauge_probe: max_gauge,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryTable {
    pub schema_version: u32,
    pub seed: u64,
    pub gauge: crate::problem::GaugeMode,
    pub preset: crate::sim::TrajectoryPreset,
    pub frames: usize,
    pub variants: Vec<VariantSummary>,
    /// Table cells: ATE in meters, or "x" for numeric failure (including
    /// ATE beyond 10x the best double-precision variant).
    pub cells: Vec<(String, String)>,
}

fn summary_cells(summaries: &[VariantSummary]) -> Vec<(String, String)> {
    let best_double = summaries
        .iter()
        .filter(|s| s.variant.ends_with("f64") && !s.failed)
        .filter_map(|s| s.ate)
        .fold(f64::INFINITY, f64::min);
    summaries
        .iter()
        .map(|s| {
            let cell = match (s.failed, s.ate) {
                (true, _) | (false, None) => "x".to_string(),
                (false, Some(ate)) => {
                    if best_double.is_finite() && ate > 10.0 * best_double {
                        "x".to_string()
                    } else {
                        format!("{ate:.6}")
                    }
                }
            };
            (s.variant.clone(), cell)
        })
        .collect()
}

fn render_table(table: &SummaryTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# ATE [m] by variant ({:?}, {:?}, {} frames, seed {})",
        table.preset, table.gauge, table.frames, table.seed
    );
    let width = table
        .cells
        .iter()
        .map(|(name, _)| name.len())
        .max()
        .unwrap_or(10)
        .max(12);
    for (name, cell) in &table.cells {
        let _ = writeln!(out, "{name:<width$}  {cell}");
    }
    out
}

/// Full experiment: one world, every selected variant, a report bundle on
/// disk. A crashing variant is captured per-variant and the experiment
/// continues.
pub fn run_experiment(config: &RunConfig) -> Result<SummaryTable, HarnessError> {
    for v in &config.variants {
        if !VariantSpec::all().contains(v) {
            return Err(HarnessError::InvalidVariants);
        }
    }
    let world = generate_world(&config.world)?;
    std::fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;

    // Ground truth, shared by all variants.
    let truth: Vec<(f64, Pose<f64>)> = world
        .truth
        .iter()
        .enumerate()
        .map(|(k, t)| (k as f64 * world.params.dt, t.pose.clone()))
        .collect();
    let truth_path = config.out_dir.join("truth.txt");
    std::fs::write(&truth_path, format_trajectory(&truth)).map_err(io_err(&truth_path))?;

    let mut summaries = Vec::new();
    for spec in &config.variants {
        log_info(&format!("running variant {}", spec.name()));
        let out = run_variant(&world, &config.solver, *spec, config.seed);
        let dir = config.out_dir.join(spec.name());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let traj_path = dir.join("trajectory.txt");
        std::fs::write(&traj_path, format_trajectory(&out.trajectory))
            .map_err(io_err(&traj_path))?;

        let mut csv = String::from(DIAGNOSTICS_CSV_HEADER);
        csv.push('\n');
        for d in &out.diagnostics {
            csv.push_str(&diagnostics_csv_row(d));
            csv.push('\n');
        }
        let csv_path = dir.join("diagnostics.csv");
        std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;

        let mut jsonl = String::new();
        for e in &out.events {
            jsonl.push_str(&serde_json::to_string(e).expect("event serializes"));
            jsonl.push('\n');
        }
        let events_path = dir.join("events.jsonl");
        std::fs::write(&events_path, jsonl).map_err(io_err(&events_path))?;

        let summary = variant_summary(&out, world.frames.len());
        let summary_path = dir.join("summary.json");
        std::fs::write(
            &summary_path,
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        )
        .map_err(io_err(&summary_path))?;

        // Wall-clock timings live apart so the rest of the bundle is
        // byte-identical across re-runs.
        let timings_path = dir.join("timings.json");
        std::fs::write(
            &timings_path,
            serde_json::to_string_pretty(&out.timings).expect("timings serialize"),
        )
        .map_err(io_err(&timings_path))?;

        summaries.push(summary);
    }

    let table = SummaryTable {
        schema_version: crate::snapshot::SCHEMA_VERSION,
        seed: config.seed,
        gauge: config.world.gauge,
        preset: config.world.preset,
        frames: config.world.n_frames,
        cells: summary_cells(&summaries),
        variants: summaries,
    };
    let table_path = config.out_dir.join("summary_table.json");
    std::fs::write(
        &table_path,
        serde_json::to_string_pretty(&table).expect("table serializes"),
    )
    .map_err(io_err(&table_path))?;
    let text_path = config.out_dir.join("summary_table.txt");
    std::fs::write(&text_path, render_table(&table)).map_err(io_err(&text_path))?;
    Ok(table)
}

/// One mechanical bundle check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionCheck {
    pub name: String,
    pub passed: bool,
    /// Expected-failure criteria (single-precision squared pipeline
    /// degradation) never affect the verdict's exit status.
    pub expected_failure: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareVerdict {
    pub checks: Vec<CriterionCheck>,
}

impl CompareVerdict {
    /// True iff every non-expected-failure criterion passes.
    pub fn all_passed(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| !c.expected_failure)
            .all(|c| c.passed)
    }
}

fn read_to_string(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Mechanically checks a report bundle: artifact presence, trajectory
/// parseability and self-consistent ATE values, double-precision backend
/// agreement, square-root single-precision stability, and the classified
/// expected failure of the squared single-precision pipeline.
pub fn compare_reports(bundle: &Path) -> Result<CompareVerdict, HarnessError> {
    let table_path = bundle.join("summary_table.json");
    let table: SummaryTable = serde_json::from_str(&read_to_string(&table_path)?)
        .map_err(|source| HarnessError::Json {
            path: table_path.display().to_string(),
            source,
        })?;

    // Artifact inventory first: report everything missing at once.
    let mut missing = Vec::new();
    let truth_path = bundle.join("truth.txt");
    if !truth_path.exists() {
        missing.push(truth_path.display().to_string());
    }
    for s in &table.variants {
        for file in ["trajectory.txt", "diagnostics.csv", "events.jsonl", "summary.json"] {
            let p = bundle.join(&s.variant).join(file);
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingArtifacts(missing));
    }

    let truth = parse_trajectory(&read_to_string(&truth_path)?, "truth.txt")?;
    let truth_poses: Vec<Pose<f64>> = truth.iter().map(|(_, p)| p.clone()).collect();

    let mut checks = Vec::new();
    let mut ates: Vec<(String, Option<f64>, bool)> = Vec::new();
    for s in &table.variants {
        let dir = bundle.join(&s.variant);
        let traj = parse_trajectory(
            &read_to_string(&dir.join("trajectory.txt"))?,
            &format!("{}/trajectory.txt", s.variant),
        )?;
        if !s.failed {
            let poses: Vec<Pose<f64>> = traj.iter().map(|(_, p)| p.clone()).collect();
            let recomputed = ate_rmse(&poses, &truth_poses)?;
            let stored = s.ate.unwrap_or(f64::NAN);
            // Tolerance covers the trajectory file's decimal quantization.
            checks.push(CriterionCheck {
                name: format!("{}: stored ATE matches trajectory", s.variant),
                passed: (recomputed - stored).abs() <= 1e-9 + 1e-7 * stored,
                expected_failure: false,
                detail: format!("stored {stored:.9}, recomputed {recomputed:.9}"),
            });
        }
        ates.push((s.variant.clone(), s.ate, s.failed));
    }

    // Double-precision pairs agree.
    let doubles: Vec<&(String, Option<f64>, bool)> = ates
        .iter()
        .filter(|(name, _, failed)| name.ends_with("f64") && !failed)
        .collect();
    if doubles.len() >= 2 {
        let values: Vec<f64> = doubles.iter().filter_map(|(_, a, _)| *a).collect();
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        checks.push(CriterionCheck {
            name: "double-precision variants agree on ATE".to_string(),
            passed: spread <= 1e-6,
            expected_failure: false,
            detail: format!("spread {spread:.3e} over {} variants", values.len()),
        });
    }

    // Square-root pipeline in single precision stays stable.
    let sqrt_f64 = table
        .variants
        .iter()
        .find(|s| s.variant.contains("ns_qr") && s.variant.ends_with("f64") && !s.failed);
    let sqrt_f32 = table
        .variants
        .iter()
        .find(|s| s.variant.contains("ns_qr") && s.variant.ends_with("f32"));
    if let (Some(d), Some(s)) = (sqrt_f64, sqrt_f32) {
        let sigma_ok = s.min_sigma_min.is_none_or(|v| v.abs() <= 1e-2)
            && s.min_sigma_min.is_some() == d.min_sigma_min.is_some();
        let ate_ok = match (s.ate, d.ate) {
            (Some(a32), Some(a64)) => !s.failed && a32 <= 2.0 * a64,
            _ => false,
        };
        checks.push(CriterionCheck {
            name: "sqrt pipeline stable in single precision".to_string(),
            passed: sigma_ok && ate_ok,
            expected_failure: false,
            detail: format!(
                "min sigma {:?}, ATE {:?} vs double {:?}",
                s.min_sigma_min, s.ate, d.ate
            ),
        });
    }

    // Squared pipeline in single precision: classified expected failure.
    for s in &table.variants {
        if !(s.variant.contains("sc_sc") && s.variant.ends_with("f32")) {
            continue;
        }
        let best_double = ates
            .iter()
            .filter(|(n, _, failed)| n.ends_with("f64") && !failed)
            .filter_map(|(_, a, _)| *a)
            .fold(f64::INFINITY, f64::min);
        let degraded = s.failed
            || s.min_sigma_min.is_some_and(|v| v < -1e-2)
            || s.ate
                .is_some_and(|a| best_double.is_finite() && a > 10.0 * best_double);
        checks.push(CriterionCheck {
            name: format!("{}: squared single-precision degradation class", s.variant),
            passed: degraded,
            expected_failure: true,
            detail: format!(
                "failed={}, min sigma {:?}, ATE {:?}",
                s.failed, s.min_sigma_min, s.ate
            ),
        });
    }

    // Gauge probes of healthy double-precision runs stay small.
    for s in &table.variants {
        if !s.variant.ends_with("f64") || s.failed {
            continue;
        }
        if let Some(max) = s.max_abs_gauge_probe {
            checks.push(CriterionCheck {
                name: format!("{}: gauge probes below 1e-6", s.variant),
                passed: max <= 1e-6,
                expected_failure: false,
                detail: format!("max |gauge probe| {max:.3e}"),
            });
        }
    }

    Ok(CompareVerdict { checks })
}

/// Log verbosity from `SWBA_LOG` (`quiet`, `info`, `debug`); default `info`.
pub fn verbosity() -> u8 {
    static LEVEL: OnceLock<u8> = OnceLock::new();
    *LEVEL.get_or_init(|| match std::env::var("SWBA_LOG").as_deref() {
        Ok("quiet") => 0,
        Ok("debug") => 2,
        _ => 1,
    })
}

pub fn log_info(msg: &str) {
    if verbosity() >= 1 {
        eprintln!("[swba] {msg}");
    }
}

pub fn log_debug(msg: &str) {
    if verbosity() >= 2 {
        eprintln!("[swba:debug] {msg}");
    }
}
