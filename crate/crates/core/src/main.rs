//! Command-line harness: `simulate` writes a synthetic world snapshot,
//! `run` executes the backend/precision variant matrix into a report
//! bundle, `compare` mechanically checks a bundle. `SWBA_LOG` controls
//! verbosity (quiet|info|debug); a key-value config file overrides flags.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use swba::estimator::{MargBackend, OptBackend, SolverConfig};
use swba::harness::{
    compare_reports, log_info, run_experiment, HarnessError, RunConfig, VariantSpec,
};
use swba::problem::GaugeMode;
use swba::sim::{generate_world, TrajectoryPreset, WorldParams};
use swba::snapshot::WorldSnapshot;

#[derive(Parser)]
#[command(name = "swba", about = "Sliding-window bundle adjustment with square-root marginalization", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as a JSON snapshot.
    Simulate {
        #[command(flatten)]
        world: WorldArgs,
        /// Output JSON file.
        #[arg(long, default_value = "world.json")]
        out: PathBuf,
    },
    /// Run the selected variants on a synthetic world and write a bundle.
    Run {
        #[command(flatten)]
        world: WorldArgs,
        /// Output directory for the report bundle.
        #[arg(long, default_value = "swba-out")]
        out: PathBuf,
        /// Comma-separated variants (e.g. ns_ldlt-ns_qr-f64); default: all 8.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Sliding-window size in keyframes.
        #[arg(long, default_value_t = 7)]
        window: usize,
        /// Key-value config file; entries override the flags.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a report bundle and print one pass/fail line per criterion.
    Compare {
        /// Bundle directory produced by `run`.
        #[arg(long)]
        bundle: PathBuf,
    },
}

#[derive(Args, Clone)]
struct WorldArgs {
    /// Trajectory preset: circle | figure8 | randomwalk.
    #[arg(long, default_value = "circle")]
    preset: String,
    /// Gauge mode: vio (4 gauge DOF) | vo (6 gauge DOF).
    #[arg(long, default_value = "vio")]
    gauge: String,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Pixel observation noise sigma.
    #[arg(long, default_value_t = 0.5)]
    noise_px: f64,
    /// Landmarks spawned per frame.
    #[arg(long, default_value_t = 8)]
    landmarks_per_frame: usize,
}

fn parse_gauge(s: &str) -> Result<GaugeMode, String> {
    match s {
        "vio" | "vio_like" => Ok(GaugeMode::VioLike),
        "vo" | "vo_like" => Ok(GaugeMode::VoLike),
        other => Err(format!("unknown gauge mode '{other}' (vio|vo)")),
    }
}

fn world_params(args: &WorldArgs) -> Result<WorldParams, String> {
    let preset: TrajectoryPreset = args.preset.parse()?;
    let gauge = parse_gauge(&args.gauge)?;
    let mut params = WorldParams::preset_defaults(preset, gauge, args.seed);
    params.n_frames = args.frames;
    params.obs_noise_px = args.noise_px;
    params.landmarks_per_frame = args.landmarks_per_frame;
    Ok(params)
}

/// Applies `key = value` lines of a config file on top of the parsed run
/// setup. Unknown keys are rejected; `#` starts a comment.
fn apply_config_file(
    path: &PathBuf,
    params: &mut WorldParams,
    solver: &mut SolverConfig,
    variants: &mut Vec<String>,
    seed: &mut u64,
) -> Result<(), String> {
    let content =
        std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "config {} line {}: expected key = value",
                path.display(),
                lineno + 1
            ));
        };
        let key = key.trim();
        let value = value.trim();
        let parse_err = |e: String| format!("config {} line {}: {e}", path.display(), lineno + 1);
        let num = |v: &str| v.parse::<f64>().map_err(|e| parse_err(e.to_string()));
        match key {
            "preset" => params.preset = value.parse().map_err(parse_err)?,
            "gauge" => params.gauge = parse_gauge(value).map_err(parse_err)?,
            "frames" => params.n_frames = num(value)? as usize,
            "seed" => {
                *seed = num(value)? as u64;
                params.seed = *seed;
            }
            "noise_px" => params.obs_noise_px = num(value)?,
            "rel_noise_rot" => params.rel_noise_rot = num(value)?,
            "rel_noise_pos" => params.rel_noise_pos = num(value)?,
            "rel_noise_vel" => params.rel_noise_vel = num(value)?,
            "landmarks_per_frame" => params.landmarks_per_frame = num(value)? as usize,
            "track_min" => params.track_min = num(value)? as usize,
            "track_max" => params.track_max = num(value)? as usize,
            "right_dropout" => params.right_dropout = num(value)?,
            "window" => solver.window_size = num(value)? as usize,
            "anchor_weight" => solver.anchor_weight = num(value)?,
            "zero_tol_factor" => solver.zero_tol_factor = num(value)?,
            "max_iterations" => solver.lm.max_iterations = num(value)? as usize,
            "variants" => {
                *variants = value.split(',').map(|s| s.trim().to_string()).collect();
            }
            other => return Err(parse_err(format!("unknown key '{other}'"))),
        }
    }
    Ok(())
}

fn run() -> Result<ExitCode, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { world, out } => {
            let params = world_params(&world)?;
            let synthetic = generate_world(&params).map_err(|e| e.to_string())?;
            let snapshot = WorldSnapshot::from_world(&synthetic);
            let json = serde_json::to_string_pretty(&snapshot).map_err(|e| e.to_string())?;
            std::fs::write(&out, json).map_err(|e| format!("{}: {e}", out.display()))?;
            log_info(&format!(
                "wrote world with {} frames, {} landmarks to {}",
                synthetic.frames.len(),
                synthetic.landmarks.len(),
                out.display()
            ));
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            world,
            out,
            variants,
            window,
            config,
        } => {
            let mut params = world_params(&world)?;
            let mut solver = SolverConfig::new(OptBackend::NsLdlt, MargBackend::NsQr, params.gauge);
            solver.window_size = window;
            let mut variant_names = variants;
            let mut seed = world.seed;
            if let Some(path) = &config {
                apply_config_file(path, &mut params, &mut solver, &mut variant_names, &mut seed)?;
            }
            solver.gauge_mode = params.gauge;
            let specs: Vec<VariantSpec> = if variant_names.is_empty() {
                VariantSpec::all()
            } else {
                variant_names
                    .iter()
                    .map(|s| s.parse())
                    .collect::<Result<_, _>>()?
            };
            let run_config = RunConfig {
                world: params,
                solver,
                variants: specs,
                out_dir: out.clone(),
                seed,
            };
            let table = run_experiment(&run_config).map_err(|e| e.to_string())?;
            let rendered = std::fs::read_to_string(out.join("summary_table.txt"))
                .unwrap_or_default();
            print!("{rendered}");
            log_info(&format!(
                "bundle with {} variants written to {}",
                table.variants.len(),
                out.display()
            ));
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { bundle } => {
            let verdict = match compare_reports(&bundle) {
                Ok(v) => v,
                Err(HarnessError::MissingArtifacts(files)) => {
                    eprintln!("missing artifacts:");
                    for f in files {
                        eprintln!("  {f}");
                    }
                    return Ok(ExitCode::FAILURE);
                }
                Err(e) => return Err(e.to_string()),
            };
            for check in &verdict.checks {
                let status = if check.passed { "PASS" } else { "FAIL" };
                let tag = if check.expected_failure {
                    " [expected-failure class]"
                } else {
                    ""
                };
                println!("{status}{tag} {} -- {}", check.name, check.detail);
            }
            Ok(if verdict.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
