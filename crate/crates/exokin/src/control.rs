//! State-estimating control: naive move, estimate, delta-correct,
//! re-calibrate.
//!
//! Per target the loop (1) refreshes the calibration offset from the current
//! frame, (2) commands the target with the offset applied to the encoder
//! target, (3) estimates the reached state from vision, and (4) optionally
//! issues one delta command `target - (estimate - target)`. Calibration is
//! refreshed at step start; the alternative (after the delta move) would
//! fold the delta residual into the next offset.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::Result;
use crate::estimator::{compute_calibration, recover_joints, SolverConfig};
use crate::geometry::RigidTransform;
use crate::kinematics::{JointVector, KinematicChain};
use crate::observation::{build_observation_set, ExoskeletonRegistry, MarkerDetection};
use crate::simulator::{CommandOutcome, SimulatedRobot};

/// Hardware adapter: the operations the control loop needs from a robot.
///
/// `command` drives the joints so that the encoders read `target` (a position
/// servo with encoder feedback). A detections file replayer or real driver
/// can implement this in place of the simulator.
pub trait RobotInterface {
    fn chain(&self) -> &KinematicChain;
    fn registry(&self) -> &ExoskeletonRegistry;
    fn command(&mut self, target: &JointVector) -> Result<CommandOutcome>;
    fn read_encoders(&self) -> JointVector;
    fn acquire_detections(&mut self) -> Vec<MarkerDetection>;

    /// Ground-truth joint state, when the backend can provide it.
    fn true_state(&self) -> Option<JointVector> {
        None
    }
}

impl RobotInterface for SimulatedRobot {
    fn chain(&self) -> &KinematicChain {
        SimulatedRobot::chain(self)
    }

    fn registry(&self) -> &ExoskeletonRegistry {
        SimulatedRobot::registry(self)
    }

    /// The servo drives the motor until its encoder reads `target`, so the
    /// motor lands at `target - encoder_offset`.
    fn command(&mut self, target: &JointVector) -> Result<CommandOutcome> {
        let motor_target = JointVector(
            target
                .as_slice()
                .iter()
                .zip(&self.noise().encoder_offset)
                .map(|(t, o)| t - o)
                .collect(),
        );
        SimulatedRobot::command(self, &motor_target)
    }

    fn read_encoders(&self) -> JointVector {
        SimulatedRobot::read_encoders(self)
    }

    fn acquire_detections(&mut self) -> Vec<MarkerDetection> {
        self.simulate_detections_masked(&BTreeSet::new())
    }

    fn true_state(&self) -> Option<JointVector> {
        Some(self.true_theta())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    Naive,
    CalibrateOnly,
    Full,
}

impl ControlMode {
    pub fn label(&self) -> &'static str {
        match self {
            ControlMode::Naive => "naive",
            ControlMode::CalibrateOnly => "no-delta",
            ControlMode::Full => "delta",
        }
    }
}

/// State reached after a move, with errors against the target end-effector
/// pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReachedState {
    /// Ground-truth joints when the backend provides them, otherwise the
    /// vision estimate.
    pub joints: JointVector,
    pub end_effector: RigidTransform,
    pub translation_error_m: f64,
    pub rotation_error_rad: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlStepReport {
    pub target: JointVector,
    pub calibration_offset: JointVector,
    pub naive: ReachedState,
    /// Present iff the delta refinement executed.
    pub refined: Option<ReachedState>,
    pub estimate_failed: bool,
    pub clamped: bool,
}

fn estimate_state(
    robot: &mut dyn RobotInterface,
    cfg: &SolverConfig,
    init: &JointVector,
) -> Result<JointVector> {
    let dets = robot.acquire_detections();
    let chain = robot.chain().clone();
    let registry = robot.registry().clone();
    let obs = build_observation_set(&dets, &registry, &chain, cfg.min_confidence)?;
    let rep = recover_joints(&chain, &obs, Some(init), cfg)?;
    Ok(rep.theta_star)
}

fn measure(
    robot: &dyn RobotInterface,
    target_pose: &RigidTransform,
    fallback_joints: &JointVector,
) -> Result<ReachedState> {
    let joints = robot.true_state().unwrap_or_else(|| fallback_joints.clone());
    let end_effector = robot.chain().end_effector(&joints)?;
    Ok(ReachedState {
        translation_error_m: (end_effector.translation - target_pose.translation).norm(),
        rotation_error_rad: end_effector.rotation.angle_to(&target_pose.rotation),
        joints,
        end_effector,
    })
}

/// Running mean of per-frame calibration samples. A single frame's
/// `theta* - theta_enc` absorbs whatever backlash slack the previous move
/// left behind (up to the full halfwidth); averaging over an episode's
/// frames cancels the slack, whose direction is random across moves, and
/// converges on the constant encoder offset.
#[derive(Debug, Clone, Default)]
pub struct CalibrationTracker {
    sum: Vec<f64>,
    count: usize,
}

impl CalibrationTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, sample: &JointVector) {
        if self.sum.len() != sample.len() {
            self.sum = vec![0.0; sample.len()];
            self.count = 0;
        }
        for (acc, v) in self.sum.iter_mut().zip(sample.as_slice()) {
            *acc += v;
        }
        self.count += 1;
    }

    /// Mean of the samples so far; `None` before the first update.
    pub fn current(&self) -> Option<JointVector> {
        (self.count > 0).then(|| {
            JointVector(self.sum.iter().map(|s| s / self.count as f64).collect())
        })
    }
}

/// One control step toward `target`. Calibration is always refreshed from
/// the current frame before the naive move; the delta command runs only
/// when `use_delta` is set. Estimation failures are reported, never fatal:
/// the naive result stands.
pub fn refine_to_target(
    robot: &mut dyn RobotInterface,
    target: &JointVector,
    cfg: &SolverConfig,
    use_delta: bool,
) -> Result<ControlStepReport> {
    refine_to_target_tracked(robot, target, cfg, use_delta, None)
}

/// [`refine_to_target`] with an optional cross-step calibration tracker:
/// the fresh frame still updates the calibration every step, but the
/// applied offset is the episode's running mean (see [`CalibrationTracker`]).
pub fn refine_to_target_tracked(
    robot: &mut dyn RobotInterface,
    target: &JointVector,
    cfg: &SolverConfig,
    use_delta: bool,
    mut tracker: Option<&mut CalibrationTracker>,
) -> Result<ControlStepReport> {
    let chain = robot.chain().clone();
    chain.check_theta(target)?;
    let target_pose = chain.end_effector(target)?;
    let zero = JointVector::zeros(chain.dof());
    let mut estimate_failed = false;

    // (1) On-the-fly calibration from the current frame.
    let enc = robot.read_encoders();
    let delta_theta = match estimate_state(robot, cfg, &enc) {
        Ok(star) => {
            let sample = compute_calibration(&star, &enc)?;
            match tracker.as_deref_mut() {
                Some(t) => {
                    t.update(&sample);
                    t.current().unwrap_or(sample)
                }
                None => sample,
            }
        }
        Err(_) => {
            estimate_failed = true;
            tracker
                .as_mut()
                .and_then(|t| t.current())
                .unwrap_or_else(|| zero.clone())
        }
    };

    // (2) Naive (offset-corrected) move: the encoder target that should land
    // the true state at `target`.
    let outcome = robot.command(&target.sub(&delta_theta)?)?;
    let mut fallback = target.clone();
    let warm_start = robot.read_encoders().add(&delta_theta)?;
    let estimate = match estimate_state(robot, cfg, &warm_start) {
        Ok(star) => {
            fallback = star.clone();
            Some(star)
        }
        Err(_) => {
            estimate_failed = true;
            None
        }
    };
    let naive = measure(robot, &target_pose, &fallback)?;

    // (4) One delta command: target - (estimate - target).
    let refined = match (use_delta, &estimate) {
        (true, Some(star)) => {
            let delta_target = chain.clamp_to_limits(&JointVector(
                target
                    .as_slice()
                    .iter()
                    .zip(star.as_slice())
                    .map(|(t, s)| t - (s - t))
                    .collect(),
            ));
            robot.command(&delta_target.sub(&delta_theta)?)?;
            let fallback = match estimate_state(robot, cfg, &delta_target) {
                Ok(star) => star,
                Err(_) => {
                    estimate_failed = true;
                    delta_target.clone()
                }
            };
            Some(measure(robot, &target_pose, &fallback)?)
        }
        _ => None,
    };

    Ok(ControlStepReport {
        target: target.clone(),
        calibration_offset: delta_theta,
        naive,
        refined,
        estimate_failed,
        clamped: outcome.clamped,
    })
}

/// Aggregate statistics over an episode's final reached states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeAggregate {
    pub steps: usize,
    pub median_translation_error_m: f64,
    pub median_rotation_error_rad: f64,
    pub mean_translation_error_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub mode: ControlMode,
    pub steps: Vec<ControlStepReport>,
    pub aggregate: EpisodeAggregate,
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs a sequential episode; backlash history carries across steps.
/// Per-step estimation errors are collected, never abort the episode.
pub fn run_episode(
    robot: &mut dyn RobotInterface,
    targets: &[JointVector],
    cfg: &SolverConfig,
    mode: ControlMode,
) -> Result<EpisodeReport> {
    let mut steps = Vec::with_capacity(targets.len());
    let mut tracker = CalibrationTracker::new();
    for target in targets {
        let step = match mode {
            ControlMode::Naive => {
                let chain = robot.chain().clone();
                chain.check_theta(target)?;
                let target_pose = chain.end_effector(target)?;
                let outcome = robot.command(target)?;
                let naive = measure(robot, &target_pose, target)?;
                ControlStepReport {
                    target: target.clone(),
                    calibration_offset: JointVector::zeros(chain.dof()),
                    naive,
                    refined: None,
                    estimate_failed: false,
                    clamped: outcome.clamped,
                }
            }
            ControlMode::CalibrateOnly => {
                refine_to_target_tracked(robot, target, cfg, false, Some(&mut tracker))?
            }
            ControlMode::Full => {
                refine_to_target_tracked(robot, target, cfg, true, Some(&mut tracker))?
            }
        };
        steps.push(step);
    }

    let mut trans: Vec<f64> = steps
        .iter()
        .map(|s| {
            s.refined
                .as_ref()
                .map(|r| r.translation_error_m)
                .unwrap_or(s.naive.translation_error_m)
        })
        .collect();
    let mut rot: Vec<f64> = steps
        .iter()
        .map(|s| {
            s.refined
                .as_ref()
                .map(|r| r.rotation_error_rad)
                .unwrap_or(s.naive.rotation_error_rad)
        })
        .collect();
    let mean = if trans.is_empty() {
        0.0
    } else {
        trans.iter().sum::<f64>() / trans.len() as f64
    };
    let aggregate = EpisodeAggregate {
        steps: steps.len(),
        median_translation_error_m: median(&mut trans),
        median_rotation_error_rad: median(&mut rot),
        mean_translation_error_m: mean,
    };
    Ok(EpisodeReport {
        mode,
        steps,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_distance, Rotation};
    use crate::kinematics::sample_six_dof_chain;
    use crate::simulator::NoiseModel;
    use nalgebra::Vector3;

    fn sample_registry() -> ExoskeletonRegistry {
        ExoskeletonRegistry::from_json_str(include_str!("../data/registry_six_dof.json")).unwrap()
    }

    fn camera() -> RigidTransform {
        RigidTransform::new(
            Rotation::rot_z(std::f64::consts::PI).compose(&Rotation::rot_x(-1.2)),
            Vector3::new(0.0, -0.35, 0.2),
        )
    }

    fn robot(noise: NoiseModel) -> SimulatedRobot {
        SimulatedRobot::new(
            sample_six_dof_chain(),
            sample_registry(),
            noise,
            camera(),
            JointVector::zeros(6),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_robot_reaches_target_exactly() {
        let mut r = robot(NoiseModel::noiseless(6, 0));
        let target = JointVector(vec![0.4, -0.3, 0.5, 0.2, -0.2, 0.3]);
        let rep = refine_to_target(&mut r, &target, &SolverConfig::default(), true).unwrap();
        assert!(rep.naive.translation_error_m < 1e-6);
        let refined = rep.refined.unwrap();
        assert!(refined.translation_error_m < 1e-6);
        assert!(!rep.estimate_failed);
    }

    #[test]
    fn backlash_only_delta_beats_naive() {
        let mut noise = NoiseModel::noiseless(6, 0);
        noise.backlash_halfwidth = vec![0.02; 6];
        // Approach monotone from below (start at zeros, positive target).
        let target = JointVector(vec![0.5, 0.4, 0.5, 0.4, 0.5, 0.4]);

        let mut r = robot(noise.clone());
        let naive = run_episode(
            &mut r,
            std::slice::from_ref(&target),
            &SolverConfig::default(),
            ControlMode::Naive,
        )
        .unwrap();

        let mut r = robot(noise);
        let full = refine_to_target(&mut r, &target, &SolverConfig::default(), true).unwrap();
        let refined = full.refined.unwrap();
        assert!(
            refined.translation_error_m < naive.steps[0].naive.translation_error_m,
            "refined {} naive {}",
            refined.translation_error_m,
            naive.steps[0].naive.translation_error_m
        );
        assert!(refined.translation_error_m < 1e-6);
    }

    #[test]
    fn pure_offset_delta_cancels_exactly() {
        // Offset-only model: one delta step cancels a constant offset.
        let mut noise = NoiseModel::noiseless(6, 0);
        noise.encoder_offset = vec![0.03, -0.04, 0.02, 0.05, -0.01, 0.03];
        let mut r = robot(noise);
        let target = JointVector(vec![0.3, 0.2, -0.3, 0.4, 0.1, -0.2]);
        let rep = refine_to_target(&mut r, &target, &SolverConfig::default(), true).unwrap();
        let refined = rep.refined.unwrap();
        assert!(refined.translation_error_m <= rep.naive.translation_error_m + 1e-12);
        assert!(refined.translation_error_m < 1e-6);
        // The recovered offset matches the injected one (sign: theta* - enc).
        for (d, o) in rep
            .calibration_offset
            .as_slice()
            .iter()
            .zip(&[0.03, -0.04, 0.02, 0.05, -0.01, 0.03])
        {
            assert!((d + o).abs() < 1e-4, "delta {d} offset {o}");
        }
    }

    #[test]
    fn empty_episode_is_a_no_op() {
        let mut r = robot(NoiseModel::noiseless(6, 0));
        let before = r.true_theta();
        let rep = run_episode(&mut r, &[], &SolverConfig::default(), ControlMode::Full).unwrap();
        assert!(rep.steps.is_empty());
        assert_eq!(r.true_theta().as_slice(), before.as_slice());
    }

    #[test]
    fn naive_mode_is_bare_command() {
        let mut noise = NoiseModel::noiseless(6, 0);
        noise.encoder_offset = vec![0.05; 6];
        let target = JointVector(vec![0.4; 6]);

        let mut r1 = robot(noise.clone());
        let rep = run_episode(
            &mut r1,
            std::slice::from_ref(&target),
            &SolverConfig::default(),
            ControlMode::Naive,
        )
        .unwrap();

        let mut r2 = robot(noise);
        RobotInterface::command(&mut r2, &target).unwrap();
        let reached = r2.true_end_effector();
        assert!(se3_distance(&rep.steps[0].naive.end_effector, &reached, 1.0) < 1e-12);
        // Encoder servo: true state misses the target by the offset.
        assert!((rep.steps[0].naive.joints[0] - (0.4 - 0.05)).abs() < 1e-12);
    }
}
