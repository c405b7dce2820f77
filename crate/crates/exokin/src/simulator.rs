//! Synthetic low-cost-robot model: ground-truth state plus corrupted
//! observations (backlash, encoder offset, marker noise, occlusion).
//!
//! Backlash is pure hysteresis slack: the link angle is dragged inside a
//! `+/- backlash_halfwidth` band around the motor position, so reversing
//! direction consumes up to twice the halfwidth before the link moves.
//! Encoders report the motor-side value plus a constant offset, blind to
//! the slack. Marker noise is an isotropic tangent-space Gaussian applied
//! on the left of each marker pose. Everything is deterministic under the
//! configured seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Twist};
use crate::kinematics::{JointVector, KinematicChain};
use crate::observation::{ExoskeletonRegistry, MarkerDetection};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Constant per-episode encoder offset, radians, one per joint.
    pub encoder_offset: Vec<f64>,
    /// When set, benchmark episodes redraw `encoder_offset` uniformly in
    /// `[-range, range]` per episode.
    #[serde(default)]
    pub encoder_offset_range: Option<f64>,
    /// Per-joint backlash half-width, radians.
    pub backlash_halfwidth: Vec<f64>,
    /// Marker translation noise sigma, meters.
    pub marker_translation_sigma: f64,
    /// Marker rotation noise sigma, radians.
    pub marker_rotation_sigma: f64,
    /// Link names (including "base") that never emit detections.
    #[serde(default)]
    pub occlusion_mask: BTreeSet<String>,
    /// Per-link dropout probability in `[0, 1]`.
    #[serde(default)]
    pub occlusion_dropout: BTreeMap<String, f64>,
    pub rng_seed: u64,
}

impl NoiseModel {
    pub fn noiseless(dof: usize, rng_seed: u64) -> Self {
        NoiseModel {
            encoder_offset: vec![0.0; dof],
            encoder_offset_range: None,
            backlash_halfwidth: vec![0.0; dof],
            marker_translation_sigma: 0.0,
            marker_rotation_sigma: 0.0,
            occlusion_mask: BTreeSet::new(),
            occlusion_dropout: BTreeMap::new(),
            rng_seed,
        }
    }

    /// The synthetic "low-cost profile": 0.02 rad backlash per joint,
    /// encoder offsets drawn uniform +/-0.05 rad per episode, 2 mm / 0.01 rad
    /// marker noise. Not claimed to match any physical robot.
    pub fn low_cost(dof: usize, rng_seed: u64) -> Self {
        let mut m = Self::noiseless(dof, rng_seed);
        m.backlash_halfwidth = vec![0.02; dof];
        m.encoder_offset_range = Some(0.05);
        m.marker_translation_sigma = 2e-3;
        m.marker_rotation_sigma = 0.01;
        m
    }

    pub fn validate(&self, dof: usize) -> Result<()> {
        if self.encoder_offset.len() != dof {
            return Err(Error::DimensionMismatch {
                expected: dof,
                actual: self.encoder_offset.len(),
            });
        }
        if self.backlash_halfwidth.len() != dof {
            return Err(Error::DimensionMismatch {
                expected: dof,
                actual: self.backlash_halfwidth.len(),
            });
        }
        if self.backlash_halfwidth.iter().any(|&b| b < 0.0) {
            return Err(Error::Validation("backlash must be >= 0".into()));
        }
        if self.marker_translation_sigma < 0.0 || self.marker_rotation_sigma < 0.0 {
            return Err(Error::Validation("noise sigmas must be >= 0".into()));
        }
        if self.occlusion_dropout.values().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Validation("dropout must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Redraws the per-episode encoder offsets when a range is configured.
    pub fn draw_episode_offsets(&mut self, rng: &mut impl Rng) {
        if let Some(range) = self.encoder_offset_range {
            for o in &mut self.encoder_offset {
                *o = rng.gen_range(-range..=range);
            }
        }
    }
}

/// Result of a command: whether any joint target was clamped to its limits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub clamped: bool,
}

/// Stateful synthetic robot. One owner at a time; independent robots may run
/// concurrently.
#[derive(Debug, Clone)]
pub struct SimulatedRobot {
    chain: KinematicChain,
    registry: ExoskeletonRegistry,
    noise: NoiseModel,
    /// Camera pose in the robot base frame.
    camera_pose: RigidTransform,
    true_theta: Vec<f64>,
    /// Motor-side position, which the encoders track.
    motor: Vec<f64>,
    rng: ChaCha8Rng,
}

impl SimulatedRobot {
    pub fn new(
        chain: KinematicChain,
        registry: ExoskeletonRegistry,
        noise: NoiseModel,
        camera_pose: RigidTransform,
        initial_theta: JointVector,
    ) -> Result<Self> {
        noise.validate(chain.dof())?;
        registry.validate_against(&chain)?;
        chain.check_theta(&initial_theta)?;
        if !chain.within_limits(&initial_theta) {
            return Err(Error::Validation("initial theta outside limits".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
        Ok(SimulatedRobot {
            motor: initial_theta.0.clone(),
            true_theta: initial_theta.0,
            chain,
            registry,
            noise,
            camera_pose,
            rng,
        })
    }

    pub fn chain(&self) -> &KinematicChain {
        &self.chain
    }

    pub fn registry(&self) -> &ExoskeletonRegistry {
        &self.registry
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn camera_pose(&self) -> &RigidTransform {
        &self.camera_pose
    }

    pub fn true_theta(&self) -> JointVector {
        JointVector(self.true_theta.clone())
    }

    pub fn true_end_effector(&self) -> RigidTransform {
        self.chain
            .end_effector(&self.true_theta())
            .expect("theta valid")
    }

    /// Moves the motors to `target` (clamped to limits, flagged). Each link
    /// angle is dragged within the backlash band around its motor position.
    pub fn command(&mut self, target: &JointVector) -> Result<CommandOutcome> {
        self.chain.check_theta(target)?;
        let mut clamped = false;
        for i in 0..self.chain.dof() {
            let limits = self.chain.joints()[i].limits_rad;
            let t = target[i];
            let ct = t.clamp(limits[0], limits[1]);
            if ct != t {
                clamped = true;
            }
            self.motor[i] = ct;
            let b = self.noise.backlash_halfwidth[i];
            self.true_theta[i] = self.true_theta[i]
                .clamp(ct - b, ct + b)
                .clamp(limits[0], limits[1]);
        }
        Ok(CommandOutcome { clamped })
    }

    /// Encoder readings: motor-side position plus the constant offset.
    pub fn read_encoders(&self) -> JointVector {
        JointVector(
            self.motor
                .iter()
                .zip(&self.noise.encoder_offset)
                .map(|(m, o)| m + o)
                .collect(),
        )
    }

    /// Emits one detection per unoccluded registered marker (including the
    /// base), perturbed by the configured tangent-space noise.
    pub fn simulate_detections(&mut self) -> Vec<MarkerDetection> {
        self.simulate_detections_masked(&BTreeSet::new())
    }

    /// Like [`simulate_detections`](Self::simulate_detections) with extra
    /// link names hidden for this frame.
    pub fn simulate_detections_masked(&mut self, extra_hidden: &BTreeSet<String>) -> Vec<MarkerDetection> {
        let poses = self
            .chain
            .forward_kinematics(&self.true_theta())
            .expect("theta valid");
        let cam_inv = self.camera_pose.inverse();

        // Stable iteration order: base first, then chain order.
        let mut order: Vec<&crate::observation::RegistryEntry> =
            self.registry.entries().iter().collect();
        order.sort_by_key(|e| self.chain.link_index(&e.link_name).unwrap_or(usize::MAX));

        let mut out = Vec::new();
        for entry in order {
            if self.noise.occlusion_mask.contains(&entry.link_name)
                || extra_hidden.contains(&entry.link_name)
            {
                continue;
            }
            if let Some(&p) = self.noise.occlusion_dropout.get(&entry.link_name) {
                if p > 0.0 && self.rng.gen::<f64>() < p {
                    continue;
                }
            }
            let link_idx = self
                .chain
                .link_index(&entry.link_name)
                .expect("validated registry");
            let link_robot = if link_idx == 0 {
                RigidTransform::identity()
            } else {
                poses[link_idx - 1]
            };
            let t_cam_link = cam_inv.compose(&link_robot);
            let t_cam_aruco = t_cam_link.compose(&entry.marker_to_link().inverse());

            let st = self.noise.marker_translation_sigma;
            let sr = self.noise.marker_rotation_sigma;
            let pose = if st > 0.0 || sr > 0.0 {
                let mut draw = |sigma: f64| {
                    let n: f64 = StandardNormal.sample(&mut self.rng);
                    n * sigma
                };
                let rot = nalgebra::Vector3::new(draw(sr), draw(sr), draw(sr));
                let trans = nalgebra::Vector3::new(draw(st), draw(st), draw(st));
                RigidTransform::exp(&Twist::new(rot, trans)).compose(&t_cam_aruco)
            } else {
                t_cam_aruco
            };
            out.push(MarkerDetection {
                marker_id: entry.marker_id,
                pose,
                confidence: 1.0,
            });
        }
        out
    }
}
