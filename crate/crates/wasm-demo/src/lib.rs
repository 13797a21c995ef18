//! Browser demo bindings: three interactive views over the core engine,
//! each returning a JSON string for the static page in `www/` to plot.
//!
//! - [`run_odometry`]: full synthetic run of one backend/precision variant;
//!   aligned trajectory, per-event smallest eigenvalue and gauge probes.
//! - [`qr_pattern`]: standard vs flat Householder QR sparsity patterns on a
//!   random rank-deficient matrix.
//! - [`prior_equivalence`]: QR-vs-Schur-complement prior agreement on a
//!   random marginalization input, full-rank or deficient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use swba::estimator::{MargBackend, OptBackend, SolverConfig};
use swba::eval::align_se3;
use swba::harness::{run_variant, VariantSpec};
use swba::linalg::{compact_svd, flat_qr, householder_qr, svd_rank, DenseMatrix};
use swba::marg::{marginalize_qr, marginalize_sc, KeepVar, MarginalizationInput, PriorForm};
use swba::problem::{FrameId, FrameLin, GaugeMode};
use swba::sim::{generate_world, TrajectoryPreset, WorldParams};
use wasm_bindgen::prelude::*;

fn parse_variant(opt: &str, marg: &str, precision: &str) -> Result<VariantSpec, String> {
    format!("{opt}-{marg}-{precision}").parse()
}

#[derive(Serialize)]
struct EventOut {
    event: usize,
    sigma_min: Option<f64>,
    tx: f64,
    ty: f64,
    tz: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
    random: f64,
    rank: usize,
}

#[derive(Serialize)]
struct OdometryOut {
    truth: Vec<[f64; 3]>,
    estimate: Vec<[f64; 3]>,
    ate: Option<f64>,
    failed: bool,
    failure_reason: Option<String>,
    events: Vec<EventOut>,
    gauge_labels: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn run_odometry_impl(
    preset: &str,
    gauge: &str,
    opt: &str,
    marg: &str,
    precision: &str,
    frames: usize,
    seed: u64,
    noise_px: f64,
) -> Result<String, String> {
    let preset: TrajectoryPreset = preset.parse()?;
    let gauge = match gauge {
        "vio" => GaugeMode::VioLike,
        "vo" => GaugeMode::VoLike,
        other => return Err(format!("unknown gauge '{other}'")),
    };
    let spec = parse_variant(opt, marg, precision)?;
    let mut params = WorldParams::preset_defaults(preset, gauge, seed);
    params.n_frames = frames.clamp(10, 1200);
    params.obs_noise_px = noise_px.clamp(0.0, 4.0);
    let world = generate_world(&params).map_err(|e| e.to_string())?;
    let base = SolverConfig::new(OptBackend::NsLdlt, MargBackend::NsQr, gauge);
    let out = run_variant(&world, &base, spec, seed);

    let truth: Vec<[f64; 3]> = world
        .truth
        .iter()
        .map(|t| [t.pose.trans.x, t.pose.trans.y, t.pose.trans.z])
        .collect();
    // Align the estimate onto the truth for display.
    let est_pts: Vec<nalgebra::Vector3<f64>> =
        out.trajectory.iter().map(|(_, p)| p.trans).collect();
    let estimate: Vec<[f64; 3]> = if est_pts.len() >= 3 {
        let truth_pts: Vec<nalgebra::Vector3<f64>> = world
            .truth
            .iter()
            .take(est_pts.len())
            .map(|t| t.pose.trans)
            .collect();
        let (rot, t) = align_se3(&est_pts, &truth_pts);
        est_pts
            .iter()
            .map(|p| {
                let a = rot * p + t;
                [a.x, a.y, a.z]
            })
            .collect()
    } else {
        est_pts.iter().map(|p| [p.x, p.y, p.z]).collect()
    };

    let events = out
        .diagnostics
        .iter()
        .map(|d| EventOut {
            event: d.event_index,
            sigma_min: d.sigma_min,
            tx: d.probes.tx,
            ty: d.probes.ty,
            tz: d.probes.tz,
            roll: d.probes.roll,
            pitch: d.probes.pitch,
            yaw: d.probes.yaw,
            random: d.probes.random,
            rank: d.prior_rank,
        })
        .collect();
    let gauge_labels = match gauge {
        GaugeMode::VioLike => vec!["tx", "ty", "tz", "yaw"],
        GaugeMode::VoLike => vec!["tx", "ty", "tz", "roll", "pitch", "yaw"],
    }
    .into_iter()
    .map(String::from)
    .collect();

    serde_json::to_string(&OdometryOut {
        truth,
        estimate,
        ate: out.ate,
        failed: out.failure.is_some(),
        failure_reason: out.failure.map(|f| f.reason),
        events,
        gauge_labels,
    })
    .map_err(|e| e.to_string())
}

/// Runs one variant of the estimator on a synthetic world.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)] // flat scalar signature for the JS side
pub fn run_odometry(
    preset: &str,
    gauge: &str,
    opt: &str,
    marg: &str,
    precision: &str,
    frames: usize,
    seed: u32,
    noise_px: f64,
) -> Result<String, JsValue> {
    run_odometry_impl(preset, gauge, opt, marg, precision, frames, seed as u64, noise_px)
        .map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct QrPatternOut {
    rows: usize,
    cols: usize,
    standard: Vec<u8>,
    flat: Vec<u8>,
    standard_nonzero_rows: usize,
    flat_total_rank: usize,
    flat_lead_rank: usize,
    svd_rank: usize,
}

fn pattern(r: &DenseMatrix<f64>, tol: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(r.rows() * r.cols());
    for i in 0..r.rows() {
        for j in 0..r.cols() {
            out.push(u8::from(r[(i, j)].abs() > tol));
        }
    }
    out
}

/// Standard vs flat Householder QR on a random matrix of the given rank.
#[wasm_bindgen]
pub fn qr_pattern(
    rows: usize,
    cols: usize,
    rank: usize,
    n_lead: usize,
    seed: u32,
) -> Result<String, JsValue> {
    let rows = rows.clamp(1, 24);
    let cols = cols.clamp(1, 24);
    let rank = rank.clamp(1, rows.min(cols));
    let n_lead = n_lead.min(cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let left = DenseMatrix::<f64>::from_fn(rows, rank, |_, _| rng.random_range(-1.0..1.0));
    let right = DenseMatrix::<f64>::from_fn(rank, cols, |_, _| rng.random_range(-1.0..1.0));
    let a = left.mul(&right);
    let tol = swba::linalg::default_zero_tol(&a);
    let std_qr = householder_qr(&a).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let flat = flat_qr(&a, n_lead, tol).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let out = QrPatternOut {
        rows: std_qr.r_factor.rows(),
        cols,
        standard: pattern(&std_qr.r_factor, tol),
        flat: pattern(&flat.r_factor, tol),
        standard_nonzero_rows: std_qr.total_rank,
        flat_total_rank: flat.total_rank,
        flat_lead_rank: flat.lead_rank,
        svd_rank: svd_rank(&a, 1e-10),
    };
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Serialize)]
struct EquivalenceOut {
    hessian_rel_err: f64,
    gradient_rel_err: f64,
    qr_prior_rows: usize,
    marg_rank_qr: usize,
    marg_rank_svd: usize,
    pseudo_inverse_used: bool,
}

/// Compares the square-root (flat QR) and Schur-complement priors built
/// from the same random marginalization input.
#[wasm_bindgen]
pub fn prior_equivalence(
    keep_frames: usize,
    rows: usize,
    deficient: bool,
    seed: u32,
) -> Result<String, JsValue> {
    let dim = 6usize;
    let keep_frames = keep_frames.clamp(1, 5);
    let n = (1 + keep_frames) * dim;
    let rows = rows.clamp(n, 120);
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut jac = DenseMatrix::<f64>::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
    if deficient {
        for r in 0..rows {
            let v = jac[(r, 0)];
            jac[(r, 1)] = v;
            let w = jac[(r, 2)];
            jac[(r, 3)] = -w;
        }
    }
    let res: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let keep_vars = (0..keep_frames)
        .map(|i| KeepVar {
            id: FrameId(1 + i as u64),
            dim,
            state: FrameLin {
                pose: swba::geometry::Pose::identity(),
                vel: None,
            },
        })
        .collect();
    let zero_tol = swba::linalg::default_zero_tol(&jac);
    let input = MarginalizationInput {
        jac,
        res,
        marg_vars: vec![(FrameId(0), dim)],
        keep_vars,
        hessian_summand: None,
        zero_tol,
    };
    let qr = marginalize_qr(&input).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let sc = marginalize_sc(&input, deficient).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let PriorForm::Sqrt { j, r } = &qr.form else {
        return Err(JsValue::from_str("qr prior not in sqrt form"));
    };
    let PriorForm::Squared { h, b } = &sc.form else {
        return Err(JsValue::from_str("sc prior not in squared form"));
    };
    let h_qr = j.gram();
    let b_qr = j.tr_mul_vec(r);
    let h_err = h_qr.sub(h).frob_norm() / h.frob_norm().max(1e-300);
    let b_norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let b_err: f64 = b_qr
        .iter()
        .zip(b)
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt()
        / b_norm.max(1e-300);
    let j_m = input.jac.block(0, 0, input.jac.rows(), dim);
    let flat = flat_qr(&input.jac, dim, zero_tol).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let out = EquivalenceOut {
        hessian_rel_err: h_err,
        gradient_rel_err: b_err,
        qr_prior_rows: j.rows(),
        marg_rank_qr: flat.lead_rank,
        marg_rank_svd: compact_svd(&j_m, 1e-10).rank,
        pseudo_inverse_used: deficient,
    };
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odometry_json_has_trajectories_and_events() {
        let json =
            run_odometry_impl("circle", "vio", "ns_ldlt", "ns_qr", "f64", 16, 4, 0.4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["truth"].as_array().unwrap().len() == 16);
        assert!(!v["estimate"].as_array().unwrap().is_empty());
        assert!(v["ate"].as_f64().unwrap() < 0.1);
        assert!(!v["events"].as_array().unwrap().is_empty());
    }

    #[test]
    fn qr_pattern_reports_matching_ranks() {
        let json = qr_pattern(10, 8, 5, 3, 7).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["flat_total_rank"].as_u64(), v["svd_rank"].as_u64());
        assert_eq!(v["flat_total_rank"].as_u64().unwrap(), 5);
    }

    #[test]
    fn equivalence_errors_are_tiny_both_regimes() {
        for deficient in [false, true] {
            let json = prior_equivalence(2, 40, deficient, 9).unwrap();
            let v: serde_json::Value = serde_json::from_str(&json).unwrap();
            assert!(v["hessian_rel_err"].as_f64().unwrap() < 1e-10);
            assert_eq!(v["marg_rank_qr"].as_u64(), v["marg_rank_svd"].as_u64());
        }
    }
}
