//! Kinematic state estimation from per-link fiducial pose observations.
//!
//! The crate recovers joint angles, camera extrinsics and encoder
//! calibration offsets for serial revolute chains whose links each carry a
//! 6D-tracked marker, and closes the loop with a delta-refinement
//! controller. A noise-injecting simulator backs the benchmarks.

pub mod benchmark;
pub mod control;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod kinematics;
pub mod observation;
pub mod scenario;
pub mod simulator;

pub mod cli;

pub use error::{Error, Result};
pub use estimator::{recover_camera_pose, recover_joints, EstimateReport, SolverConfig};
pub use geometry::{se3_distance, RigidTransform, Rotation, Twist};
pub use kinematics::{JointSpec, JointVector, KinematicChain};
pub use observation::{build_observation_set, DetectionFrame, ExoskeletonRegistry, ObservationSet};
pub use simulator::{NoiseModel, SimulatedRobot};
