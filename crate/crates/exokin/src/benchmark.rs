//! Seeded benchmark studies: state estimation vs encoder-only forward
//! kinematics, occlusion sweeps, and control-loop comparisons.
//!
//! Every trial derives its RNG from the benchmark seed and trial index, so
//! results are deterministic and order-independent; trials may run in
//! parallel and aggregate identically.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

use crate::control::{median, run_episode, ControlMode, ControlStepReport};
use crate::error::Result;
use crate::estimator::{recover_joints, SolverConfig};
use crate::geometry::RigidTransform;
use crate::kinematics::{JointVector, KinematicChain};
use crate::observation::{build_observation_set, ExoskeletonRegistry};
use crate::simulator::{NoiseModel, SimulatedRobot};

pub const ENCODER_ONLY: &str = "encoder-only";
pub const OURS_NO_ENC: &str = "ours-no-enc";
pub const OURS_ENC: &str = "ours-enc";

/// Per-method aggregate over a batch of trials.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodStats {
    pub trials: usize,
    pub median_translation_m: f64,
    pub p90_translation_m: f64,
    pub median_rotation_rad: f64,
    pub p90_rotation_rad: f64,
    pub per_joint_rms_rad: Vec<f64>,
    /// Trials where estimation fell back to encoder readings (no links
    /// visible).
    pub fallback_count: usize,
    /// Trials flagged as potentially degenerate (fewer than two links
    /// visible).
    pub flagged_degenerate: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OcclusionLevelReport {
    /// Total visible markers including the base.
    pub visible_markers: usize,
    pub methods: BTreeMap<String, MethodStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateBenchmarkReport {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub trials: usize,
    pub methods: BTreeMap<String, MethodStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occlusion_sweep: Option<Vec<OcclusionLevelReport>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlModeSummary {
    pub median_translation_m: f64,
    pub p90_translation_m: f64,
    pub median_rotation_rad: f64,
    pub p90_rotation_rad: f64,
    pub steps: Vec<ControlStepReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlBenchmarkReport {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub targets: usize,
    pub modes: BTreeMap<String, ControlModeSummary>,
}

/// Stable hex digest of the solver config, embedded in reports.
pub fn config_hash(cfg: &SolverConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    hex_string(&digest[..8])
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn tool_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

fn trial_seed(seed: u64, trial: u64) -> u64 {
    seed ^ trial.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e5ab)
}

fn random_theta(chain: &KinematicChain, rng: &mut impl Rng) -> JointVector {
    JointVector(
        chain
            .joints()
            .iter()
            .map(|j| rng.gen_range(j.limits_rad[0]..j.limits_rad[1]))
            .collect(),
    )
}

struct MethodSample {
    translation_m: f64,
    rotation_rad: f64,
    joint_errors: Vec<f64>,
    fallback: bool,
    degenerate: bool,
}

struct StateTrial {
    methods: BTreeMap<&'static str, MethodSample>,
}

fn aggregate(samples: Vec<&MethodSample>, dof: usize) -> MethodStats {
    let n = samples.len();
    let mut trans: Vec<f64> = samples.iter().map(|s| s.translation_m).collect();
    let mut rot: Vec<f64> = samples.iter().map(|s| s.rotation_rad).collect();
    let mut rms = vec![0.0; dof];
    for s in &samples {
        for (i, e) in s.joint_errors.iter().enumerate() {
            rms[i] += e * e;
        }
    }
    for v in &mut rms {
        *v = (*v / n.max(1) as f64).sqrt();
    }
    MethodStats {
        trials: n,
        median_translation_m: median(&mut trans),
        p90_translation_m: percentile(&mut trans.clone(), 0.9),
        median_rotation_rad: median(&mut rot),
        p90_rotation_rad: percentile(&mut rot.clone(), 0.9),
        per_joint_rms_rad: rms,
        fallback_count: samples.iter().filter(|s| s.fallback).count(),
        flagged_degenerate: samples.iter().filter(|s| s.degenerate).count(),
    }
}

fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let rank = ((values.len() as f64) * p).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

fn ee_errors(
    chain: &KinematicChain,
    estimate: &JointVector,
    truth: &JointVector,
) -> (f64, f64, Vec<f64>) {
    let est = chain.end_effector(estimate).expect("valid theta");
    let tru = chain.end_effector(truth).expect("valid theta");
    let joint_errors = estimate
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    (
        (est.translation - tru.translation).norm(),
        est.rotation.angle_to(&tru.rotation),
        joint_errors,
    )
}

fn state_trial(
    chain: &KinematicChain,
    registry: &ExoskeletonRegistry,
    camera_pose: &RigidTransform,
    noise_template: &NoiseModel,
    cfg: &SolverConfig,
    seed: u64,
    trial: u64,
    extra_hidden: &BTreeSet<String>,
) -> Result<StateTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, trial));
    let mut noise = noise_template.clone();
    noise.rng_seed = rng.gen();
    noise.draw_episode_offsets(&mut rng);

    let initial = random_theta(chain, &mut rng);
    let target = random_theta(chain, &mut rng);
    let mut robot = SimulatedRobot::new(
        chain.clone(),
        registry.clone(),
        noise,
        *camera_pose,
        initial,
    )?;
    robot.command(&target)?;
    let truth = robot.true_theta();
    let enc = robot.read_encoders();
    let dets = robot.simulate_detections_masked(extra_hidden);
    let obs = build_observation_set(&dets, registry, chain, cfg.min_confidence)?;

    let mut methods = BTreeMap::new();
    let (t, r, je) = ee_errors(chain, &enc, &truth);
    methods.insert(
        ENCODER_ONLY,
        MethodSample {
            translation_m: t,
            rotation_rad: r,
            joint_errors: je,
            fallback: false,
            degenerate: false,
        },
    );

    for (label, init) in [(OURS_NO_ENC, None), (OURS_ENC, Some(&enc))] {
        let sample = match recover_joints(chain, &obs, init, cfg) {
            Ok(rep) => {
                let (t, r, je) = ee_errors(chain, &rep.theta_star, &truth);
                MethodSample {
                    translation_m: t,
                    rotation_rad: r,
                    joint_errors: je,
                    fallback: false,
                    degenerate: rep.underconstrained,
                }
            }
            // No links visible: the method reduces to raw encoder state.
            Err(_) => {
                let (t, r, je) = ee_errors(chain, &enc, &truth);
                MethodSample {
                    translation_m: t,
                    rotation_rad: r,
                    joint_errors: je,
                    fallback: true,
                    degenerate: true,
                }
            }
        };
        methods.insert(label, sample);
    }
    Ok(StateTrial { methods })
}

fn run_state_trials(
    chain: &KinematicChain,
    registry: &ExoskeletonRegistry,
    camera_pose: &RigidTransform,
    noise: &NoiseModel,
    cfg: &SolverConfig,
    seed: u64,
    trials: usize,
    extra_hidden: &BTreeSet<String>,
    parallel: bool,
) -> Result<BTreeMap<String, MethodStats>> {
    let run = |t: u64| state_trial(chain, registry, camera_pose, noise, cfg, seed, t, extra_hidden);
    let results: Result<Vec<StateTrial>> = if parallel {
        (0..trials as u64).into_par_iter().map(run).collect()
    } else {
        (0..trials as u64).map(run).collect()
    };
    let results = results?;
    let mut out = BTreeMap::new();
    for label in [ENCODER_ONLY, OURS_NO_ENC, OURS_ENC] {
        let samples: Vec<&MethodSample> = results.iter().map(|r| &r.methods[label]).collect();
        out.insert(label.to_string(), aggregate(samples, chain.dof()));
    }
    Ok(out)
}

/// Occlusion levels expressed as total visible markers (base included):
/// visible links are taken from the end-effector side, mirroring marker
/// masking from the base up.
fn occlusion_mask_for_level(chain: &KinematicChain, visible_markers: usize) -> BTreeSet<String> {
    let d = chain.dof();
    let visible_links = visible_markers.saturating_sub(1).min(d);
    chain
        .link_names()
        .iter()
        .skip(1)
        .take(d - visible_links)
        .map(|s| s.to_string())
        .collect()
}

pub struct StateBenchmarkOptions {
    pub trials: usize,
    pub seed: u64,
    /// Visible-marker counts to sweep; empty disables the sweep.
    pub occlusion_levels: Vec<usize>,
    pub parallel: bool,
}

pub fn benchmark_state(
    chain: &KinematicChain,
    registry: &ExoskeletonRegistry,
    camera_pose: &RigidTransform,
    noise: &NoiseModel,
    cfg: &SolverConfig,
    opts: &StateBenchmarkOptions,
) -> Result<StateBenchmarkReport> {
    let methods = run_state_trials(
        chain,
        registry,
        camera_pose,
        noise,
        cfg,
        opts.seed,
        opts.trials,
        &BTreeSet::new(),
        opts.parallel,
    )?;
    let occlusion_sweep = if opts.occlusion_levels.is_empty() {
        None
    } else {
        let mut levels = Vec::new();
        for &k in &opts.occlusion_levels {
            let mask = occlusion_mask_for_level(chain, k);
            levels.push(OcclusionLevelReport {
                visible_markers: k,
                methods: run_state_trials(
                    chain,
                    registry,
                    camera_pose,
                    noise,
                    cfg,
                    opts.seed,
                    opts.trials,
                    &mask,
                    opts.parallel,
                )?,
            });
        }
        Some(levels)
    };
    Ok(StateBenchmarkReport {
        tool_version: tool_version(),
        seed: opts.seed,
        config_hash: config_hash(cfg),
        trials: opts.trials,
        methods,
        occlusion_sweep,
    })
}

pub fn benchmark_control(
    chain: &KinematicChain,
    registry: &ExoskeletonRegistry,
    camera_pose: &RigidTransform,
    noise_template: &NoiseModel,
    cfg: &SolverConfig,
    targets: usize,
    seed: u64,
) -> Result<ControlBenchmarkReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, 0xC0));
    let mut noise = noise_template.clone();
    noise.rng_seed = rng.gen();
    noise.draw_episode_offsets(&mut rng);
    let initial = random_theta(chain, &mut rng);
    let target_list: Vec<JointVector> = (0..targets).map(|_| random_theta(chain, &mut rng)).collect();

    let mut modes = BTreeMap::new();
    for mode in [ControlMode::Naive, ControlMode::CalibrateOnly, ControlMode::Full] {
        let mut robot = SimulatedRobot::new(
            chain.clone(),
            registry.clone(),
            noise.clone(),
            *camera_pose,
            initial.clone(),
        )?;
        let episode = run_episode(&mut robot, &target_list, cfg, mode)?;
        let mut trans: Vec<f64> = episode
            .steps
            .iter()
            .map(|s| {
                s.refined
                    .as_ref()
                    .map(|r| r.translation_error_m)
                    .unwrap_or(s.naive.translation_error_m)
            })
            .collect();
        let mut rot: Vec<f64> = episode
            .steps
            .iter()
            .map(|s| {
                s.refined
                    .as_ref()
                    .map(|r| r.rotation_error_rad)
                    .unwrap_or(s.naive.rotation_error_rad)
            })
            .collect();
        modes.insert(
            mode.label().to_string(),
            ControlModeSummary {
                median_translation_m: median(&mut trans),
                p90_translation_m: percentile(&mut trans.clone(), 0.9),
                median_rotation_rad: median(&mut rot),
                p90_rotation_rad: percentile(&mut rot.clone(), 0.9),
                steps: episode.steps,
            },
        );
    }
    Ok(ControlBenchmarkReport {
        tool_version: tool_version(),
        seed,
        config_hash: config_hash(cfg),
        targets,
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::kinematics::sample_six_dof_chain;
    use nalgebra::Vector3;

    fn setup() -> (KinematicChain, ExoskeletonRegistry, RigidTransform) {
        let chain = sample_six_dof_chain();
        let registry =
            ExoskeletonRegistry::from_json_str(include_str!("../data/registry_six_dof.json"))
                .unwrap();
        let camera = RigidTransform::new(
            Rotation::rot_z(std::f64::consts::PI).compose(&Rotation::rot_x(-1.2)),
            Vector3::new(0.0, -0.35, 0.2),
        );
        (chain, registry, camera)
    }

    #[test]
    fn zero_noise_all_methods_near_zero() {
        let (chain, registry, camera) = setup();
        let noise = NoiseModel::noiseless(6, 0);
        let cfg = SolverConfig::default();
        let rep = benchmark_state(
            &chain,
            &registry,
            &camera,
            &noise,
            &cfg,
            &StateBenchmarkOptions {
                trials: 10,
                seed: 3,
                occlusion_levels: vec![],
                parallel: false,
            },
        )
        .unwrap();
        for stats in rep.methods.values() {
            assert!(stats.median_translation_m < 1e-6);
        }
    }

    #[test]
    fn parallel_and_serial_agree() {
        let (chain, registry, camera) = setup();
        let noise = NoiseModel::low_cost(6, 0);
        let cfg = SolverConfig::default();
        let mk = |parallel| {
            benchmark_state(
                &chain,
                &registry,
                &camera,
                &noise,
                &cfg,
                &StateBenchmarkOptions {
                    trials: 16,
                    seed: 9,
                    occlusion_levels: vec![],
                    parallel,
                },
            )
            .unwrap()
        };
        let a = serde_json::to_string(&mk(false)).unwrap();
        let b = serde_json::to_string(&mk(true)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occlusion_masks_are_from_base_up() {
        let (chain, _, _) = setup();
        let m1 = occlusion_mask_for_level(&chain, 1);
        assert_eq!(m1.len(), 6);
        let m3 = occlusion_mask_for_level(&chain, 3);
        assert_eq!(m3.len(), 4);
        assert!(!m3.contains("gripper"));
        assert!(!m3.contains("wrist_roll"));
        let m7 = occlusion_mask_for_level(&chain, 7);
        assert!(m7.is_empty());
    }
}
