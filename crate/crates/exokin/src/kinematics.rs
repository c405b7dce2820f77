//! Serial-chain robot model and forward kinematics.
//!
//! The joint model is URDF-like: each joint applies its fixed
//! `parent_transform` and then rotates about `axis` by the joint angle.
//! Link 0 is the base with identity pose in the robot frame; link `j`
//! (1-based) is the child of joint `j`.
//!
//! Jacobians are body-frame: column `i` of [`KinematicChain::link_pose_jacobian`]
//! is the twist of link `j`'s pose, expressed in link `j`'s own frame, per
//! unit change of joint `i`. The estimator relies on this convention.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Rotation};

/// Reserved for forward compatibility; only revolute joints are supported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    #[default]
    Revolute,
}

/// One revolute joint: fixed transform from the parent link frame to this
/// joint's frame at zero angle, a unit rotation axis in the joint frame, and
/// advisory limits in radians.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent_transform: RigidTransform,
    pub axis: [f64; 3],
    pub limits_rad: [f64; 2],
    #[serde(default, rename = "type")]
    pub joint_type: JointType,
    /// Joints marked excluded are held fixed at their initial value during
    /// joint recovery (e.g. a gripper jaw that no marker observes).
    #[serde(default)]
    pub exclude_from_residuals: bool,
}

impl JointSpec {
    pub fn axis_vector(&self) -> Vector3<f64> {
        Vector3::new(self.axis[0], self.axis[1], self.axis[2])
    }
}

/// Joint angles in radians; length matches the chain's DOF count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointVector(pub Vec<f64>);

impl JointVector {
    pub fn zeros(d: usize) -> Self {
        JointVector(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Elementwise difference, checking lengths.
    pub fn sub(&self, other: &JointVector) -> Result<JointVector> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(JointVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add(&self, other: &JointVector) -> Result<JointVector> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(JointVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }
}

impl std::ops::Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A validated serial chain of revolute joints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ChainDoc", into = "ChainDoc")]
pub struct KinematicChain {
    name: String,
    joints: Vec<JointSpec>,
}

#[derive(Serialize, Deserialize)]
struct ChainDoc {
    name: String,
    joints: Vec<JointSpec>,
}

impl TryFrom<ChainDoc> for KinematicChain {
    type Error = Error;
    fn try_from(doc: ChainDoc) -> Result<Self> {
        KinematicChain::new(doc.name, doc.joints)
    }
}

impl From<KinematicChain> for ChainDoc {
    fn from(c: KinematicChain) -> ChainDoc {
        ChainDoc {
            name: c.name,
            joints: c.joints,
        }
    }
}

/// Link name reserved for the robot base (link index 0).
pub const BASE_LINK: &str = "base";

impl KinematicChain {
    pub fn new(name: String, joints: Vec<JointSpec>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Validation("chain must have at least one joint".into()));
        }
        let mut seen = std::collections::HashSet::new();
        seen.insert(BASE_LINK.to_string());
        for j in &joints {
            let n = j.axis_vector().norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "joint '{}': non-unit axis (norm {n})",
                    j.name
                )));
            }
            if j.limits_rad[0] > j.limits_rad[1] {
                return Err(Error::Validation(format!(
                    "joint '{}': inverted limits [{}, {}]",
                    j.name, j.limits_rad[0], j.limits_rad[1]
                )));
            }
            if !seen.insert(j.name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate link name '{}'",
                    j.name
                )));
            }
        }
        Ok(KinematicChain { name, joints })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    /// Base plus one name per joint's child link, d+1 entries.
    pub fn link_names(&self) -> Vec<&str> {
        std::iter::once(BASE_LINK)
            .chain(self.joints.iter().map(|j| j.name.as_str()))
            .collect()
    }

    /// 1-based link index for a joint/link name; `BASE_LINK` maps to 0.
    pub fn link_index(&self, name: &str) -> Option<usize> {
        if name == BASE_LINK {
            return Some(0);
        }
        self.joints.iter().position(|j| j.name == name).map(|i| i + 1)
    }

    pub fn check_theta(&self, theta: &JointVector) -> Result<()> {
        if theta.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                actual: theta.len(),
            });
        }
        if theta.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite joint value".into()));
        }
        Ok(())
    }

    pub fn clamp_to_limits(&self, theta: &JointVector) -> JointVector {
        JointVector(
            theta
                .as_slice()
                .iter()
                .zip(&self.joints)
                .map(|(&v, j)| v.clamp(j.limits_rad[0], j.limits_rad[1]))
                .collect(),
        )
    }

    pub fn within_limits(&self, theta: &JointVector) -> bool {
        theta
            .as_slice()
            .iter()
            .zip(&self.joints)
            .all(|(&v, j)| v >= j.limits_rad[0] && v <= j.limits_rad[1])
    }

    /// Local transform of joint `i` (0-based) at angle `angle`:
    /// `parent_transform * rot(axis, angle)`.
    pub fn local_transform(&self, i: usize, angle: f64) -> RigidTransform {
        let joint = &self.joints[i];
        let axis = nalgebra::Unit::new_normalize(joint.axis_vector());
        joint
            .parent_transform
            .compose(&RigidTransform::from_rotation(Rotation::about_axis(
                &axis, angle,
            )))
    }

    /// Per-link poses in the base frame, one per joint, computed as the
    /// running product of local transforms (prefix-consistent by
    /// construction). Defined for all theta; limits are advisory here.
    pub fn forward_kinematics(&self, theta: &JointVector) -> Result<Vec<RigidTransform>> {
        self.check_theta(theta)?;
        let mut poses = Vec::with_capacity(self.dof());
        let mut acc = RigidTransform::identity();
        for (i, &angle) in theta.as_slice().iter().enumerate() {
            acc = acc.compose(&self.local_transform(i, angle));
            poses.push(acc);
        }
        Ok(poses)
    }

    /// Pose of the last link (end effector) in the base frame.
    pub fn end_effector(&self, theta: &JointVector) -> Result<RigidTransform> {
        Ok(*self.forward_kinematics(theta)?.last().expect("d >= 1"))
    }

    /// Body-frame 6 x d Jacobian of link `link_index` (1-based). Rows 0..3
    /// are rotational, rows 3..6 translational. Columns for joints
    /// downstream of the link are zero.
    pub fn link_pose_jacobian(
        &self,
        theta: &JointVector,
        link_index: usize,
    ) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        if link_index == 0 || link_index > self.dof() {
            return Err(Error::LinkIndexOutOfRange {
                index: link_index,
                dof: self.dof(),
            });
        }
        let poses = self.forward_kinematics(theta)?;
        let pose_j = poses[link_index - 1];
        let pose_j_inv = pose_j.inverse();
        let mut jac = DMatrix::zeros(6, self.dof());
        for i in 0..link_index {
            // Perturbing theta_i inserts a rotation about axis_i at link i's
            // frame; mapped into link j's body frame via the adjoint of
            // T_j^-1 T_i.
            let rel = pose_j_inv.compose(&poses[i]);
            let omega = rel.rotation.rotate(&self.joints[i].axis_vector());
            let v = rel.translation.cross(&omega);
            for r in 0..3 {
                jac[(r, i)] = omega[r];
                jac[(r + 3, i)] = v[r];
            }
        }
        Ok(jac)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            context: "chain document".into(),
            message: e.to_string(),
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The bundled 6-DOF sample chain (SO-100-like proportions).
pub fn sample_six_dof_chain() -> KinematicChain {
    KinematicChain::from_json_str(include_str!("../data/chain_six_dof.json"))
        .expect("bundled chain is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn one_joint_chain() -> KinematicChain {
        KinematicChain::new(
            "one".into(),
            vec![JointSpec {
                name: "link1".into(),
                parent_transform: RigidTransform::from_translation(0.0, 0.0, 0.1),
                axis: [0.0, 0.0, 1.0],
                limits_rad: [-3.0, 3.0],
                joint_type: JointType::Revolute,
                exclude_from_residuals: false,
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_theta_is_parent_transform_product() {
        let chain = sample_six_dof_chain();
        let poses = chain
            .forward_kinematics(&JointVector::zeros(chain.dof()))
            .unwrap();
        let mut acc = RigidTransform::identity();
        for (i, pose) in poses.iter().enumerate() {
            acc = acc.compose(&chain.joints()[i].parent_transform);
            assert!(crate::geometry::se3_distance(pose, &acc, 1.0) < 1e-12);
        }
    }

    #[test]
    fn single_joint_pose() {
        let chain = one_joint_chain();
        let poses = chain
            .forward_kinematics(&JointVector(vec![FRAC_PI_2]))
            .unwrap();
        let expected = RigidTransform::from_translation(0.0, 0.0, 0.1)
            .compose(&RigidTransform::from_rotation(Rotation::rot_z(FRAC_PI_2)));
        assert!(crate::geometry::se3_distance(&poses[0], &expected, 1.0) < 1e-12);
    }

    #[test]
    fn two_dof_planar_end_link() {
        // Two Z joints, 0.1 m along X after each rotation; modeled by putting
        // the offset in the next joint's parent transform.
        let joint = |name: &str, px: f64| JointSpec {
            name: name.into(),
            parent_transform: RigidTransform::from_translation(px, 0.0, 0.0),
            axis: [0.0, 0.0, 1.0],
            limits_rad: [-3.0, 3.0],
            joint_type: JointType::Revolute,
            exclude_from_residuals: false,
        };
        let chain =
            KinematicChain::new("planar".into(), vec![joint("l1", 0.0), joint("l2", 0.1)])
                .unwrap();
        let poses = chain
            .forward_kinematics(&JointVector(vec![FRAC_PI_2, FRAC_PI_2]))
            .unwrap();
        // After joint 1 rotates pi/2, the 0.1 offset lands at (0, 0.1, 0).
        let end = poses[1].translation;
        assert_relative_eq!(end.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(end.y, 0.1, epsilon = 1e-12);
        assert_relative_eq!(end.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_causality_and_pure_revolute() {
        let chain = sample_six_dof_chain();
        let theta = JointVector(vec![0.3, -0.4, 0.5, 0.1, -0.2, 0.6]);
        let jac = chain.link_pose_jacobian(&theta, 3).unwrap();
        for i in 3..chain.dof() {
            for r in 0..6 {
                assert_eq!(jac[(r, i)], 0.0);
            }
        }

        let one = one_joint_chain();
        let jac = one
            .link_pose_jacobian(&JointVector(vec![0.0]), 1)
            .unwrap();
        assert_relative_eq!(jac[(2, 0)], 1.0, epsilon = 1e-12);
        for r in [0, 1, 3, 4, 5] {
            assert_relative_eq!(jac[(r, 0)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn load_rejects_bad_documents() {
        let bad_axis = r#"{"name":"c","joints":[{"name":"l1",
            "parent_transform":{"translation":[0,0,0.1],"quaternion":[1,0,0,0]},
            "axis":[0,0,2],"limits_rad":[-1,1]}]}"#;
        let err = KinematicChain::from_json_str(bad_axis).unwrap_err();
        assert!(err.to_string().contains("non-unit axis"));

        let inverted = r#"{"name":"c","joints":[{"name":"l1",
            "parent_transform":{"translation":[0,0,0.1],"quaternion":[1,0,0,0]},
            "axis":[0,0,1],"limits_rad":[1,-1]}]}"#;
        assert!(KinematicChain::from_json_str(inverted).is_err());
    }

    #[test]
    fn bundled_chain_round_trips() {
        let chain = sample_six_dof_chain();
        assert_eq!(chain.dof(), 6);
        let json = chain.to_json_string().unwrap();
        let back = KinematicChain::from_json_str(&json).unwrap();
        assert_eq!(back.dof(), 6);
        assert_eq!(back.link_names(), chain.link_names());
    }

    #[test]
    fn minimal_one_joint_document() {
        let doc = r#"{"name":"mini","joints":[{"name":"l1",
            "parent_transform":{"translation":[0,0,0.1],"quaternion":[1,0,0,0]},
            "axis":[0,0,1],"limits_rad":[-1.5,1.5]}]}"#;
        let chain = KinematicChain::from_json_str(doc).unwrap();
        assert_eq!(chain.dof(), 1);
    }
}
