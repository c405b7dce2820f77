//! Command-line surface: estimate, extrinsics, calibrate, simulate,
//! benchmark-state, benchmark-control, validate.
//!
//! All outputs are JSON documents (written with `--out`, echoed as
//! human-readable tables on stdout). Diagnostics go to stderr only. Exit
//! codes: 0 success, 2 parse/validation, 3 unobservable, 4 non-convergence,
//! 5 numerical failure.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::benchmark::{
    benchmark_control, benchmark_state, config_hash, tool_version, StateBenchmarkOptions,
};
use crate::error::{Error, Result};
use crate::estimator::{
    compute_calibration, recover_camera_pose, recover_joints, EstimateReport, SolverConfig,
};
use crate::geometry::RigidTransform;
use crate::kinematics::JointVector;
use crate::observation::{build_observation_set, DetectionFrame, MarkerDetection};
use crate::scenario::{load_chain_file, load_registry_file, Scenario};
use crate::simulator::{CommandOutcome, SimulatedRobot};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_UNOBSERVABLE: i32 = 3;
pub const EXIT_NO_CONVERGENCE: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Unobservable | Error::BaseUnobserved | Error::UnknownMarker(_) => EXIT_UNOBSERVABLE,
        Error::NumericalFailure { .. } => EXIT_NUMERICAL,
        _ => EXIT_PARSE,
    }
}

#[derive(Parser)]
#[command(name = "exokin", version, about = "Robot state estimation from fiducial-exoskeleton link poses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct SolverArgs {
    /// Rotation weight (m/rad) of the SE(3) distance metric.
    #[arg(long)]
    pub rot_weight: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

impl SolverArgs {
    pub fn to_config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(w) = self.rot_weight {
            cfg.rot_weight = w;
        }
        if let Some(n) = self.max_iterations {
            cfg.max_iterations = n;
        }
        cfg
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Recover joint angles (and extrinsics/calibration) from a detections file.
    Estimate {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Encoder readings file ({"joints": [...]}); enables warm start and
        /// calibration output.
        #[arg(long)]
        encoders: Option<PathBuf>,
        /// Warm-start from the encoder readings instead of zeros.
        #[arg(long)]
        init_from_encoders: bool,
        /// Emit both zero-init and encoder-init reports.
        #[arg(long)]
        compare_init: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Recover the camera pose in the robot frame from the base marker.
    Extrinsics {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover the encoder calibration offset from one frame.
    Calibrate {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        encoders: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Replay a scenario, emitting per-step ground truth and detections.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare encoder-only FK against vision-based estimation.
    BenchmarkState {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sweep visible-marker counts 1, 3, 5, 7 (base included).
        #[arg(long)]
        occlusion_sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Compare naive, calibrate-only, and delta control over an episode.
    BenchmarkControl {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 50)]
        targets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Schema-check any input file (chain, registry, detections, scenario).
    Validate { file: PathBuf },
}

#[derive(Serialize)]
struct EstimateEnvelope {
    tool_version: String,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    zero_init: Option<EstimateReport>,
    report: EstimateReport,
}

#[derive(Serialize)]
struct ExtrinsicsDoc {
    tool_version: String,
    camera_pose: RigidTransform,
}

#[derive(Serialize)]
struct CalibrationDoc {
    tool_version: String,
    config_hash: String,
    theta_star: JointVector,
    theta_enc: JointVector,
    calibration_offset: JointVector,
}

#[derive(Serialize)]
struct SimStep {
    step: usize,
    command: Vec<f64>,
    clamped: bool,
    true_theta: Vec<f64>,
    encoders: Vec<f64>,
    end_effector: RigidTransform,
    detections: Vec<MarkerDetection>,
}

#[derive(Serialize)]
struct SimulationDoc {
    tool_version: String,
    seed: u64,
    steps: Vec<SimStep>,
}

#[derive(serde::Deserialize)]
struct EncodersDoc {
    joints: Vec<f64>,
}

fn read_encoders_file(path: &PathBuf) -> Result<JointVector> {
    let text = std::fs::read_to_string(path)?;
    let doc: EncodersDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("encoders {}", path.display()),
        message: e.to_string(),
    })?;
    Ok(JointVector(doc.joints))
}

fn read_detections_file(path: &PathBuf) -> Result<DetectionFrame> {
    let text = std::fs::read_to_string(path)?;
    DetectionFrame::from_json_str(&text)
}

fn write_out<T: Serialize>(out: &Option<PathBuf>, doc: &T) -> Result<()> {
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(doc)?)?;
    }
    Ok(())
}

fn print_estimate(report: &EstimateReport, label: &str) {
    println!("[{label}] converged={} iterations={} final_cost={:.3e}",
        report.converged, report.iterations, report.final_cost);
    let joints: Vec<String> = report
        .theta_star
        .as_slice()
        .iter()
        .map(|v| format!("{v:+.5}"))
        .collect();
    println!("[{label}] theta_star = [{}]", joints.join(", "));
    for r in &report.per_link_residuals {
        println!(
            "[{label}]   link {}: residual {:.3e} m / {:.3e} rad",
            r.link, r.translation_m, r.rotation_rad
        );
    }
    if report.underconstrained {
        println!("[{label}] WARNING: fewer than two links visible; possible degenerate minimum");
    }
}

/// Executes one parsed command, returning the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Estimate {
            chain,
            registry,
            detections,
            encoders,
            init_from_encoders,
            compare_init,
            out,
            solver,
        } => {
            let chain = load_chain_file(&chain)?;
            let registry = load_registry_file(&registry)?;
            registry.validate_against(&chain)?;
            let frame = read_detections_file(&detections)?;
            let cfg = solver.to_config();
            let obs = build_observation_set(&frame.detections, &registry, &chain, cfg.min_confidence)?;
            let enc = encoders.as_ref().map(read_encoders_file).transpose()?;

            let camera_pose = recover_camera_pose(&obs, &registry).ok();
            let run_one = |init: Option<&JointVector>| -> Result<EstimateReport> {
                let mut rep = recover_joints(&chain, &obs, init, &cfg)?;
                rep.camera_pose = camera_pose;
                if let Some(enc) = &enc {
                    rep.calibration_offset = Some(compute_calibration(&rep.theta_star, enc)?);
                }
                Ok(rep)
            };

            let init = if init_from_encoders { enc.as_ref() } else { None };
            let report = run_one(init)?;
            let zero_init = if compare_init && enc.is_some() {
                let z = run_one(None)?;
                print_estimate(&z, "zero-init");
                Some(z)
            } else {
                None
            };
            print_estimate(&report, if init.is_some() { "encoder-init" } else { "estimate" });
            let converged = report.converged;
            write_out(
                &out,
                &EstimateEnvelope {
                    tool_version: tool_version(),
                    config_hash: config_hash(&cfg),
                    zero_init,
                    report,
                },
            )?;
            Ok(if converged { EXIT_OK } else { EXIT_NO_CONVERGENCE })
        }

        Command::Extrinsics {
            registry,
            detections,
            chain,
            out,
        } => {
            let chain = load_chain_file(&chain)?;
            let registry = load_registry_file(&registry)?;
            let frame = read_detections_file(&detections)?;
            let obs = build_observation_set(&frame.detections, &registry, &chain, 0.0)?;
            let camera_pose = recover_camera_pose(&obs, &registry)?;
            let t = camera_pose.translation;
            println!(
                "camera_pose: t = [{:.6}, {:.6}, {:.6}] m, q(wxyz) = {:?}",
                t.x,
                t.y,
                t.z,
                camera_pose.rotation.quaternion_wxyz()
            );
            write_out(
                &out,
                &ExtrinsicsDoc {
                    tool_version: tool_version(),
                    camera_pose,
                },
            )?;
            Ok(EXIT_OK)
        }

        Command::Calibrate {
            chain,
            registry,
            detections,
            encoders,
            out,
            solver,
        } => {
            let chain = load_chain_file(&chain)?;
            let registry = load_registry_file(&registry)?;
            let frame = read_detections_file(&detections)?;
            let enc = read_encoders_file(&encoders)?;
            let cfg = solver.to_config();
            let obs = build_observation_set(&frame.detections, &registry, &chain, cfg.min_confidence)?;
            let rep = recover_joints(&chain, &obs, Some(&enc), &cfg)?;
            let offset = compute_calibration(&rep.theta_star, &enc)?;
            let vals: Vec<String> = offset.as_slice().iter().map(|v| format!("{v:+.5}")).collect();
            println!("calibration_offset = [{}]", vals.join(", "));
            let converged = rep.converged;
            write_out(
                &out,
                &CalibrationDoc {
                    tool_version: tool_version(),
                    config_hash: config_hash(&cfg),
                    theta_star: rep.theta_star,
                    theta_enc: enc,
                    calibration_offset: offset,
                },
            )?;
            Ok(if converged { EXIT_OK } else { EXIT_NO_CONVERGENCE })
        }

        Command::Simulate { scenario, seed, out } => {
            let sc = Scenario::load(&scenario)?;
            let mut noise = sc.doc.noise_model.clone();
            if let Some(seed) = seed {
                noise.rng_seed = seed;
            }
            let seed = noise.rng_seed;
            let mut robot = SimulatedRobot::new(
                sc.chain.clone(),
                sc.registry.clone(),
                noise,
                sc.doc.camera_pose,
                sc.initial_theta(),
            )?;
            let mut steps = Vec::new();
            for (i, command) in sc.doc.episode.iter().enumerate() {
                let CommandOutcome { clamped } = robot.command(&JointVector(command.clone()))?;
                let hidden: BTreeSet<String> = sc
                    .doc
                    .occlusion_schedule
                    .as_ref()
                    .and_then(|s| s.get(i))
                    .map(|names| names.iter().cloned().collect())
                    .unwrap_or_default();
                let detections = robot.simulate_detections_masked(&hidden);
                steps.push(SimStep {
                    step: i,
                    command: command.clone(),
                    clamped,
                    true_theta: robot.true_theta().0,
                    encoders: robot.read_encoders().0,
                    end_effector: robot.true_end_effector(),
                    detections,
                });
            }
            println!("simulated {} steps (seed {seed})", steps.len());
            write_out(
                &out,
                &SimulationDoc {
                    tool_version: tool_version(),
                    seed,
                    steps,
                },
            )?;
            Ok(EXIT_OK)
        }

        Command::BenchmarkState {
            scenario,
            trials,
            seed,
            occlusion_sweep,
            out,
            solver,
        } => {
            let sc = Scenario::load(&scenario)?;
            let cfg = solver.to_config();
            let levels = if occlusion_sweep { vec![1, 3, 5, 7] } else { vec![] };
            let report = benchmark_state(
                &sc.chain,
                &sc.registry,
                &sc.doc.camera_pose,
                &sc.doc.noise_model,
                &cfg,
                &StateBenchmarkOptions {
                    trials,
                    seed,
                    occlusion_levels: levels,
                    parallel: true,
                },
            )?;
            println!("state benchmark: {} trials, seed {}", report.trials, report.seed);
            println!("{:<14} {:>12} {:>12} {:>12} {:>12}", "method", "med trans", "p90 trans", "med rot", "p90 rot");
            for (name, m) in &report.methods {
                println!(
                    "{:<14} {:>12.5} {:>12.5} {:>12.5} {:>12.5}",
                    name, m.median_translation_m, m.p90_translation_m, m.median_rotation_rad, m.p90_rotation_rad
                );
            }
            if let Some(sweep) = &report.occlusion_sweep {
                for level in sweep {
                    println!("-- {} visible markers --", level.visible_markers);
                    for (name, m) in &level.methods {
                        println!(
                            "{:<14} {:>12.5} m  fallback {}  flagged {}",
                            name, m.median_translation_m, m.fallback_count, m.flagged_degenerate
                        );
                    }
                }
            }
            write_out(&out, &report)?;
            Ok(EXIT_OK)
        }

        Command::BenchmarkControl {
            scenario,
            targets,
            seed,
            out,
            solver,
        } => {
            let sc = Scenario::load(&scenario)?;
            let cfg = solver.to_config();
            let report = benchmark_control(
                &sc.chain,
                &sc.registry,
                &sc.doc.camera_pose,
                &sc.doc.noise_model,
                &cfg,
                targets,
                seed,
            )?;
            println!("control benchmark: {} targets, seed {}", report.targets, report.seed);
            println!("{:<12} {:>12} {:>12}", "mode", "med trans", "med rot");
            for (name, m) in &report.modes {
                println!(
                    "{:<12} {:>12.5} {:>12.5}",
                    name, m.median_translation_m, m.median_rotation_rad
                );
            }
            write_out(&out, &report)?;
            Ok(EXIT_OK)
        }

        Command::Validate { file } => {
            let text = std::fs::read_to_string(&file)?;
            let kinds: Vec<(&str, std::result::Result<(), String>)> = vec![
                (
                    "chain",
                    crate::kinematics::KinematicChain::from_json_str(&text)
                        .map(|_| ())
                        .map_err(|e| e.to_string()),
                ),
                (
                    "registry",
                    crate::observation::ExoskeletonRegistry::from_json_str(&text)
                        .map(|_| ())
                        .map_err(|e| e.to_string()),
                ),
                (
                    "detections",
                    DetectionFrame::from_json_str(&text)
                        .map(|_| ())
                        .map_err(|e| e.to_string()),
                ),
                (
                    "scenario",
                    serde_json::from_str::<crate::scenario::ScenarioDoc>(&text)
                        .map(|_| ())
                        .map_err(|e| e.to_string()),
                ),
            ];
            let ok: Vec<&str> = kinds
                .iter()
                .filter_map(|(k, r)| r.is_ok().then_some(*k))
                .collect();
            if ok.is_empty() {
                for (k, r) in &kinds {
                    if let Err(e) = r {
                        eprintln!("not a {k}: {e}");
                    }
                }
                return Err(Error::Validation(format!(
                    "{} matches no known schema",
                    file.display()
                )));
            }
            println!("{} validates as: {}", file.display(), ok.join(", "));
            Ok(EXIT_OK)
        }
    }
}
