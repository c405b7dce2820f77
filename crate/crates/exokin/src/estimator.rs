//! Joint recovery, camera extrinsics, and encoder calibration from observed
//! link poses.
//!
//! The joint solve is Levenberg-Marquardt on a stacked residual: for every
//! visible link, 3 translation components plus `rot_weight` times the
//! rotation log of the observed-to-predicted relative rotation. The squared
//! norm of that 6-vector is exactly `se3_distance(fk, obs, rot_weight)^2`,
//! so the metric and the solver stay consistent.
//!
//! Isotropic damping regularizes rank-deficient directions toward the
//! initialization, which is what makes encoder warm-starts help when most
//! links are occluded.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{so3_right_jacobian_inv, RigidTransform, DEFAULT_ROT_WEIGHT};
use crate::kinematics::{JointVector, KinematicChain};
use crate::observation::{ExoskeletonRegistry, ObservationSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Weight (m/rad) mapping rotation error into the translation metric.
    pub rot_weight: f64,
    pub enforce_joint_limits: bool,
    /// Initial Levenberg-Marquardt damping.
    pub damping_init: f64,
    /// Optional per-link residual weights (1-based link index order);
    /// defaults to uniform 1.
    #[serde(default)]
    pub link_weights: Option<Vec<f64>>,
    /// Detections below this confidence are treated as invisible.
    #[serde(default)]
    pub min_confidence: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 100,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            rot_weight: DEFAULT_ROT_WEIGHT,
            enforce_joint_limits: true,
            damping_init: 1e-4,
            link_weights: None,
            min_confidence: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be >= 1".into()));
        }
        for (name, v) in [
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("rot_weight", self.rot_weight),
            ("damping_init", self.damping_init),
        ] {
            // NaN must fail too, hence the negated comparison.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(v > 0.0) {
                return Err(Error::Validation(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Residual magnitudes for one visible link at the solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkResidual {
    pub link: usize,
    pub translation_m: f64,
    pub rotation_rad: f64,
}

/// Outcome of a joint recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta_star: JointVector,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub per_link_residuals: Vec<LinkResidual>,
    pub camera_pose: Option<RigidTransform>,
    pub calibration_offset: Option<JointVector>,
    /// Accepted-step cost sequence, including the initial cost.
    pub cost_trace: Vec<f64>,
    /// True when fewer than two links were visible; the solution may be a
    /// degenerate minimum.
    pub underconstrained: bool,
}

struct ResidualModel<'a> {
    chain: &'a KinematicChain,
    obs: &'a ObservationSet,
    visible: Vec<usize>,
    weights: Vec<f64>,
    rot_weight: f64,
    free: Vec<usize>,
}

impl<'a> ResidualModel<'a> {
    fn new(chain: &'a KinematicChain, obs: &'a ObservationSet, cfg: &SolverConfig) -> Result<Self> {
        if obs.dof() != chain.dof() {
            return Err(Error::DimensionMismatch {
                expected: chain.dof(),
                actual: obs.dof(),
            });
        }
        let visible = obs.visible_links();
        if visible.is_empty() {
            return Err(Error::Unobservable);
        }
        let weights = match &cfg.link_weights {
            Some(w) => {
                if w.len() != chain.dof() {
                    return Err(Error::DimensionMismatch {
                        expected: chain.dof(),
                        actual: w.len(),
                    });
                }
                visible.iter().map(|&j| w[j - 1]).collect()
            }
            None => vec![1.0; visible.len()],
        };
        let free = (0..chain.dof())
            .filter(|&i| !chain.joints()[i].exclude_from_residuals)
            .collect();
        Ok(ResidualModel {
            chain,
            obs,
            visible,
            weights,
            rot_weight: cfg.rot_weight,
            free,
        })
    }

    /// Stacked residual at `theta`. Rows per visible link: 3 translation,
    /// then 3 weighted rotation-log components.
    fn residuals(&self, theta: &JointVector) -> Result<DVector<f64>> {
        let poses = self.chain.forward_kinematics(theta)?;
        let mut r = DVector::zeros(6 * self.visible.len());
        for (k, &j) in self.visible.iter().enumerate() {
            let fk = &poses[j - 1];
            let obs = self.obs.link_pose(j).expect("visible");
            let w = self.weights[k];
            let dt = fk.translation - obs.translation;
            let rel = obs.rotation.inverse().compose(&fk.rotation);
            let phi = rel.log().unwrap_or_else(|_| {
                // At the branch cut the magnitude is what matters; pick the
                // scaled-axis representation nalgebra provides.
                rel.unit_quaternion().scaled_axis()
            });
            for a in 0..3 {
                r[6 * k + a] = w * dt[a];
                r[6 * k + 3 + a] = w * self.rot_weight * phi[a];
            }
        }
        Ok(r)
    }

    /// Residual Jacobian with respect to the free joints.
    fn jacobian(&self, theta: &JointVector) -> Result<DMatrix<f64>> {
        let poses = self.chain.forward_kinematics(theta)?;
        let mut jac = DMatrix::zeros(6 * self.visible.len(), self.free.len());
        for (k, &j) in self.visible.iter().enumerate() {
            let fk = &poses[j - 1];
            let obs = self.obs.link_pose(j).expect("visible");
            let w = self.weights[k];
            let rel = obs.rotation.inverse().compose(&fk.rotation);
            let phi = rel.log().unwrap_or_else(|_| rel.unit_quaternion().scaled_axis());
            let jr_inv = so3_right_jacobian_inv(&phi);
            let body = self.chain.link_pose_jacobian(theta, j)?;
            let rot = fk.rotation.matrix();
            for (c, &i) in self.free.iter().enumerate() {
                let omega = nalgebra::Vector3::new(body[(0, i)], body[(1, i)], body[(2, i)]);
                let v = nalgebra::Vector3::new(body[(3, i)], body[(4, i)], body[(5, i)]);
                // Body twist (omega, v): dt = R_j v, dphi = Jr^-1(phi) omega.
                let dt = rot * v;
                let dphi = jr_inv * omega;
                for a in 0..3 {
                    jac[(6 * k + a, c)] = w * dt[a];
                    jac[(6 * k + 3 + a, c)] = w * self.rot_weight * dphi[a];
                }
            }
        }
        Ok(jac)
    }

    fn apply_step(&self, theta: &JointVector, step: &DVector<f64>) -> JointVector {
        let mut out = theta.clone();
        for (c, &i) in self.free.iter().enumerate() {
            out.0[i] += step[c];
        }
        out
    }
}

struct LmOutcome {
    theta: JointVector,
    converged: bool,
    iterations: usize,
    cost: f64,
    trace: Vec<f64>,
}

/// Closed-form per-joint initialization: when links `j-1` and `j` are both
/// observed, `T_{j-1}^-1 T_j = parent_transform_j * rot(axis_j, theta_j)`,
/// so `theta_j` is the axis-projected log of the leftover rotation. Joints
/// without a visible pair (or excluded ones) keep their `base` value.
fn sequential_init(
    chain: &KinematicChain,
    obs: &ObservationSet,
    base: &JointVector,
    free: &[usize],
) -> JointVector {
    let mut out = base.clone();
    let identity = RigidTransform::identity();
    for j in 1..=chain.dof() {
        if !free.contains(&(j - 1)) {
            continue;
        }
        let prev = if j == 1 {
            Some(&identity)
        } else {
            obs.link_pose(j - 1)
        };
        let (Some(prev), Some(cur)) = (prev, obs.link_pose(j)) else {
            continue;
        };
        let joint = &chain.joints()[j - 1];
        let leftover = joint
            .parent_transform
            .rotation
            .inverse()
            .compose(&prev.rotation.inverse())
            .compose(&cur.rotation);
        let phi = leftover
            .log()
            .unwrap_or_else(|_| leftover.unit_quaternion().scaled_axis());
        let axis = nalgebra::Vector3::from(joint.axis);
        out.0[j - 1] = phi.dot(&axis);
    }
    chain.clamp_to_limits(&out)
}

fn lm_minimize(
    model: &ResidualModel,
    chain: &KinematicChain,
    cfg: &SolverConfig,
    mut theta: JointVector,
) -> Result<LmOutcome> {
    let mut r = model.residuals(&theta)?;
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(Error::NumericalFailure {
            iteration: 0,
            last_iterate: theta.0.clone(),
        });
    }
    let mut trace = vec![cost];
    let mut lambda = cfg.damping_init;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..cfg.max_iterations {
        let jac = model.jacobian(&theta)?;
        let grad = jac.transpose() * &r;
        if grad.amax() < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        let hess = jac.transpose() * &jac;

        let mut accepted = false;
        let mut step_norm = 0.0;
        for _ in 0..40 {
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut candidate = model.apply_step(&theta, &step);
            if cfg.enforce_joint_limits {
                candidate = chain.clamp_to_limits(&candidate);
            }
            let r_new = model.residuals(&candidate)?;
            let cost_new = r_new.norm_squared();
            if !cost_new.is_finite() {
                return Err(Error::NumericalFailure {
                    iteration: iter,
                    last_iterate: theta.0.clone(),
                });
            }
            if cost_new <= cost {
                step_norm = step.norm();
                theta = candidate;
                r = r_new;
                cost = cost_new;
                trace.push(cost);
                lambda = (lambda * 0.1).max(1e-15);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                break;
            }
        }
        iterations = iter + 1;
        if !accepted {
            // No acceptable step at any damping: stationary.
            converged = true;
            break;
        }
        if step_norm < cfg.step_tolerance {
            converged = true;
            break;
        }
    }

    Ok(LmOutcome {
        theta,
        converged,
        iterations,
        cost,
        trace,
    })
}

/// Recovers the joint vector that best aligns forward kinematics with the
/// observed link poses. `init` warm-starts the solve (encoder readings when
/// available). Without a warm start the solver runs from zeros and from a
/// closed-form sequential initialization, keeping the lower-cost result;
/// zero-start alone can fall into limit-pinned local minima.
pub fn recover_joints(
    chain: &KinematicChain,
    obs: &ObservationSet,
    init: Option<&JointVector>,
    cfg: &SolverConfig,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let model = ResidualModel::new(chain, obs, cfg)?;

    let start = match init {
        Some(t) => {
            chain.check_theta(t)?;
            if cfg.enforce_joint_limits {
                chain.clamp_to_limits(t)
            } else {
                t.clone()
            }
        }
        None => JointVector::zeros(chain.dof()),
    };

    let mut best = lm_minimize(&model, chain, cfg, start.clone())?;
    if init.is_none() {
        let analytic = sequential_init(chain, obs, &start, &model.free);
        if analytic.as_slice() != start.as_slice() {
            let alt = lm_minimize(&model, chain, cfg, analytic)?;
            if alt.cost < best.cost {
                best = alt;
            }
        }
    }
    let LmOutcome {
        theta,
        converged,
        iterations,
        cost,
        trace,
    } = best;

    let per_link_residuals = {
        let poses = chain.forward_kinematics(&theta)?;
        model
            .visible
            .iter()
            .map(|&j| {
                let fk = &poses[j - 1];
                let o = obs.link_pose(j).expect("visible");
                LinkResidual {
                    link: j,
                    translation_m: (fk.translation - o.translation).norm(),
                    rotation_rad: fk.rotation.angle_to(&o.rotation),
                }
            })
            .collect()
    };

    Ok(EstimateReport {
        underconstrained: model.visible.len() < 2,
        theta_star: theta,
        converged,
        iterations,
        final_cost: cost,
        per_link_residuals,
        camera_pose: None,
        calibration_offset: None,
        cost_trace: trace,
    })
}

/// Camera pose in the robot frame from the base marker:
/// `(T_cam_aruco * T_aruco_exo * T_exo_robot)^-1`.
pub fn recover_camera_pose(
    obs: &ObservationSet,
    reg: &ExoskeletonRegistry,
) -> Result<RigidTransform> {
    let base_marker = obs.base_marker_cam().ok_or(Error::BaseUnobserved)?;
    let entry = reg.base_entry().ok_or(Error::BaseUnobserved)?;
    Ok(base_marker.compose(&entry.marker_to_link()).inverse())
}

/// Encoder calibration offset: `theta_star - theta_enc`, elementwise.
pub fn compute_calibration(theta_star: &JointVector, theta_enc: &JointVector) -> Result<JointVector> {
    theta_star.sub(theta_enc)
}

/// Assembled gradient of the squared-cost objective at `theta`, exposed for
/// verification against finite differences.
pub fn cost_gradient(
    chain: &KinematicChain,
    obs: &ObservationSet,
    theta: &JointVector,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let model = ResidualModel::new(chain, obs, cfg)?;
    let r = model.residuals(theta)?;
    let jac = model.jacobian(theta)?;
    let g = jac.transpose() * r * 2.0;
    Ok(g.iter().copied().collect())
}

/// Squared-cost objective at `theta` (sum of squared residuals).
pub fn cost_value(
    chain: &KinematicChain,
    obs: &ObservationSet,
    theta: &JointVector,
    cfg: &SolverConfig,
) -> Result<f64> {
    let model = ResidualModel::new(chain, obs, cfg)?;
    Ok(model.residuals(theta)?.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::sample_six_dof_chain;
    use crate::observation::{observation_from_theta, observation_from_theta_masked};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_theta(chain: &KinematicChain, rng: &mut impl Rng) -> JointVector {
        JointVector(
            chain
                .joints()
                .iter()
                .map(|j| rng.gen_range(j.limits_rad[0]..j.limits_rad[1]))
                .collect(),
        )
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let chain = sample_six_dof_chain();
        let theta = JointVector(vec![0.4, -0.3, 0.7, 0.2, -0.5, 0.1]);
        let obs = observation_from_theta(&chain, &theta).unwrap();
        let rep = recover_joints(&chain, &obs, Some(&theta), &SolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
        assert!(rep.final_cost < 1e-12);
    }

    #[test]
    fn noiseless_recovery_from_zero_init() {
        let chain = sample_six_dof_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let theta = random_theta(&chain, &mut rng);
            let obs = observation_from_theta(&chain, &theta).unwrap();
            let rep = recover_joints(&chain, &obs, None, &SolverConfig::default()).unwrap();
            for (a, b) in rep.theta_star.as_slice().iter().zip(theta.as_slice()) {
                assert!((a - b).abs() < 1e-4, "joint error {}", (a - b).abs());
            }
        }
    }

    #[test]
    fn zero_visible_links_is_unobservable() {
        let chain = sample_six_dof_chain();
        let theta = JointVector::zeros(6);
        let obs = observation_from_theta_masked(&chain, &theta, &[]).unwrap();
        assert!(matches!(
            recover_joints(&chain, &obs, None, &SolverConfig::default()),
            Err(Error::Unobservable)
        ));
    }

    #[test]
    fn end_effector_only_flags_underconstrained() {
        let chain = sample_six_dof_chain();
        let theta = JointVector(vec![0.5, 0.4, -0.6, 0.3, 0.2, -0.1]);
        let obs = observation_from_theta_masked(&chain, &theta, &[6]).unwrap();
        let rep = recover_joints(&chain, &obs, None, &SolverConfig::default()).unwrap();
        assert!(rep.underconstrained);
        // Warm-started near the truth, a single end-effector constraint
        // keeps the solution at the truth.
        let rep = recover_joints(&chain, &obs, Some(&theta), &SolverConfig::default()).unwrap();
        for (a, b) in rep.theta_star.as_slice().iter().zip(theta.as_slice()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn monotone_cost_trace() {
        let chain = sample_six_dof_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = random_theta(&chain, &mut rng);
        let obs = observation_from_theta(&chain, &theta).unwrap();
        let rep = recover_joints(&chain, &obs, None, &SolverConfig::default()).unwrap();
        for w in rep.cost_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn calibration_is_elementwise_difference() {
        let star = JointVector(vec![0.5, 0.5]);
        let enc = JointVector(vec![0.3, 0.3]);
        let d = compute_calibration(&star, &enc).unwrap();
        assert_eq!(d.as_slice(), &[0.2, 0.2]);
        assert!(compute_calibration(&star, &JointVector(vec![0.0])).is_err());
        let zero = compute_calibration(&star, &star).unwrap();
        assert!(zero.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn excluded_joint_stays_at_init() {
        let mut chain = sample_six_dof_chain();
        // Rebuild with the gripper excluded.
        let mut joints = chain.joints().to_vec();
        joints[5].exclude_from_residuals = true;
        chain = KinematicChain::new("excl".into(), joints).unwrap();
        let theta = JointVector(vec![0.4, -0.3, 0.7, 0.2, -0.5, 0.3]);
        let obs = observation_from_theta(&chain, &theta).unwrap();
        let init = JointVector(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.9]);
        let rep = recover_joints(&chain, &obs, Some(&init), &SolverConfig::default()).unwrap();
        assert_eq!(rep.theta_star[5], 0.9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let chain = sample_six_dof_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SolverConfig::default();
        for _ in 0..10 {
            let truth = random_theta(&chain, &mut rng);
            let obs = observation_from_theta(&chain, &truth).unwrap();
            let at = random_theta(&chain, &mut rng);
            let g = cost_gradient(&chain, &obs, &at, &cfg).unwrap();
            let h = 1e-6;
            for i in 0..chain.dof() {
                let mut p = at.clone();
                p.0[i] += h;
                let mut m = at.clone();
                m.0[i] -= h;
                let fd = (cost_value(&chain, &obs, &p, &cfg).unwrap()
                    - cost_value(&chain, &obs, &m, &cfg).unwrap())
                    / (2.0 * h);
                let scale = fd.abs().max(g[i].abs()).max(1.0);
                assert!(
                    (g[i] - fd).abs() / scale < 1e-5,
                    "joint {i}: analytic {} fd {}",
                    g[i],
                    fd
                );
            }
        }
    }
}
