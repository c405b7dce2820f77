//! SE(3)/SO(3) algebra used by every other module.
//!
//! Rotations are stored as unit quaternions and renormalized after each
//! composition so drift stays below 1e-9 over long chains. Twists are
//! ordered rotation-first: `(wx, wy, wz, vx, vy, vz)`.
//!
//! Serialized form of a [`RigidTransform`] is `translation: [x, y, z]`
//! (meters) plus `quaternion: [w, x, y, z]`; quaternions with
//! `|norm - 1| > 1e-6` are rejected on parse.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Crossover below which exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Default rotation weight (m/rad) for [`se3_distance`]: on a ~0.3 m-reach
/// arm, 1 rad of link-orientation error displaces downstream geometry by
/// roughly decimeters.
pub const DEFAULT_ROT_WEIGHT: f64 = 0.1;

const LOG_BRANCH_MARGIN: f64 = 1e-6;

/// Threshold for the smooth series coefficients A, B, C below; both branches
/// agree to ~1e-15 at this crossover.
const COEFF_TAYLOR: f64 = 1e-2;

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds from `[w, x, y, z]`, rejecting quaternions with
    /// `|norm - 1| > 1e-6`. The accepted quaternion is renormalized.
    pub fn from_quaternion_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        let defect = (norm - 1.0).abs();
        if !defect.is_finite() || defect > 1e-6 {
            return Err(Error::QuaternionNorm { defect });
        }
        Ok(Rotation(UnitQuaternion::new_normalize(Quaternion::new(
            w, x, y, z,
        ))))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(q)
    }

    /// Rotation by `angle` radians about `axis`.
    pub fn about_axis(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Rotation(UnitQuaternion::from_axis_angle(axis, angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::about_axis(&Vector3::x_axis(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::about_axis(&Vector3::y_axis(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::about_axis(&Vector3::z_axis(), angle)
    }

    /// Group composition `self * other`, renormalized.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(UnitQuaternion::new_normalize(
            self.0.into_inner() * other.0.into_inner(),
        ))
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    /// Principal rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        let vn = q.imag().norm();
        2.0 * vn.atan2(q.w.abs())
    }

    /// Geodesic angle between `self` and `other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.inverse().compose(other).angle()
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn unit_quaternion(&self) -> UnitQuaternion<f64> {
        self.0
    }

    /// `[w, x, y, z]` of the unit quaternion.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// SO(3) exponential of a rotation vector (axis * angle).
    pub fn exp(omega: &Vector3<f64>) -> Rotation {
        let theta = omega.norm();
        let half = 0.5 * theta;
        if theta < SMALL_ANGLE {
            // sin(t/2)/t = 1/2 - t^2/48 + ...
            let k = 0.5 - theta * theta / 48.0;
            let q = Quaternion::from_parts(half.cos(), omega * k);
            Rotation(UnitQuaternion::new_normalize(q))
        } else {
            let k = half.sin() / theta;
            let q = Quaternion::from_parts(half.cos(), omega * k);
            Rotation(UnitQuaternion::new_normalize(q))
        }
    }

    /// Principal-branch rotation vector. Errors when the angle is within
    /// 1e-6 of pi.
    pub fn log(&self) -> Result<Vector3<f64>> {
        let angle = self.angle();
        if angle >= std::f64::consts::PI - LOG_BRANCH_MARGIN {
            return Err(Error::LogBranchAmbiguity { angle });
        }
        // Force w >= 0 for the principal branch.
        let q = if self.0.quaternion().w < 0.0 {
            -*self.0.quaternion()
        } else {
            *self.0.quaternion()
        };
        let v = q.imag();
        let vn = v.norm();
        if angle < SMALL_ANGLE {
            // theta/|v| = 2/w * (1 - |v|^2/(3 w^2)) + ...
            let w = q.w;
            Ok(v * (2.0 / w) * (1.0 - vn * vn / (3.0 * w * w)))
        } else {
            Ok(v * (angle / vn))
        }
    }
}

/// se(3) tangent coordinates: rotational part in radians, translational in
/// meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Twist {
            rotation,
            translation,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }
}

/// An element of SE(3): rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        RigidTransform::new(Rotation::identity(), Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        RigidTransform::new(rotation, Vector3::zeros())
    }

    /// Group composition `self * other`; rotation renormalized.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    /// Group inverse: `(R, t)^-1 = (R^T, -R^T t)`.
    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.inverse();
        RigidTransform {
            translation: -rot_inv.rotate(&self.translation),
            rotation: rot_inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// SE(3) exponential.
    pub fn exp(twist: &Twist) -> RigidTransform {
        let rotation = Rotation::exp(&twist.rotation);
        let v_mat = so3_left_jacobian(&twist.rotation);
        RigidTransform {
            rotation,
            translation: v_mat * twist.translation,
        }
    }

    /// Principal-branch SE(3) logarithm; `exp(log(T)) = T` within 1e-8 for
    /// rotation angles below `pi - 1e-6`.
    pub fn log(&self) -> Result<Twist> {
        let omega = self.rotation.log()?;
        let v_inv = so3_left_jacobian_inv(&omega);
        Ok(Twist {
            rotation: omega,
            translation: v_inv * self.translation,
        })
    }
}

/// Weighted SE(3) distance:
/// `sqrt(|t_a - t_b|^2 + rot_weight^2 * angle(R_a^T R_b)^2)`.
///
/// Symmetric, non-negative, zero iff `a == b`. `rot_weight` must be > 0.
pub fn se3_distance(a: &RigidTransform, b: &RigidTransform, rot_weight: f64) -> f64 {
    debug_assert!(rot_weight > 0.0, "rot_weight must be positive");
    let dt = (a.translation - b.translation).norm_squared();
    let dr = a.rotation.angle_to(&b.rotation);
    (dt + rot_weight * rot_weight * dr * dr).sqrt()
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) left Jacobian `V = I + A [w] + B [w]^2` with
/// `A = (1 - cos t)/t^2`, `B = (t - sin t)/t^3`.
pub(crate) fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let t2 = theta * theta;
    let (a, b) = if theta < COEFF_TAYLOR {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let w = skew(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Inverse of the SO(3) left Jacobian:
/// `V^-1 = I - 1/2 [w] + C [w]^2` with
/// `C = 1/t^2 - (1 + cos t)/(2 t sin t)`.
pub(crate) fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let c = jac_inv_coeff(omega.norm());
    let w = skew(omega);
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Inverse of the SO(3) right Jacobian: `Jr^-1 = I + 1/2 [w] + C [w]^2`.
pub(crate) fn so3_right_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let c = jac_inv_coeff(omega.norm());
    let w = skew(omega);
    Matrix3::identity() + w * 0.5 + w * w * c
}

fn jac_inv_coeff(theta: f64) -> f64 {
    // Ill-conditioned at t = pi; clamp just inside the principal branch.
    let theta = theta.min(std::f64::consts::PI - 1e-3);
    let t2 = theta * theta;
    if theta < COEFF_TAYLOR {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    translation: [f64; 3],
    quaternion: [f64; 4],
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let t = &self.translation;
        TransformRepr {
            translation: [t.x, t.y, t.z],
            quaternion: self.rotation.quaternion_wxyz(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(deserializer)?;
        let [w, x, y, z] = repr.quaternion;
        let rotation =
            Rotation::from_quaternion_wxyz(w, x, y, z).map_err(serde::de::Error::custom)?;
        let [tx, ty, tz] = repr.translation;
        Ok(RigidTransform::new(rotation, Vector3::new(tx, ty, tz)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rot_z_t(angle: f64, x: f64, y: f64, z: f64) -> RigidTransform {
        RigidTransform::new(Rotation::rot_z(angle), Vector3::new(x, y, z))
    }

    #[test]
    fn compose_identity() {
        let t = rot_z_t(0.7, 0.1, -0.2, 0.3);
        let c = RigidTransform::identity().compose(&t);
        assert!(se3_distance(&c, &t, 1.0) < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = rot_z_t(1.1, 0.4, 0.2, -0.5);
        let c = t.compose(&t.inverse());
        assert!(c.translation.norm() < 1e-9);
        assert!(c.rotation.angle() < 1e-9);
    }

    #[test]
    fn compose_hand_evaluated() {
        // rotZ(pi/2)+t(1,0,0) twice -> rotZ(pi)+t(1,1,0)
        let t = rot_z_t(FRAC_PI_2, 1.0, 0.0, 0.0);
        let c = t.compose(&t);
        assert_relative_eq!(c.translation.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.translation.y, 1.0, epsilon = 1e-12);
        assert_relative_eq!(c.translation.z, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.rotation.angle(), PI, epsilon = 1e-9);
    }

    #[test]
    fn inverse_identity_and_involution() {
        let id = RigidTransform::identity().inverse();
        assert!(id.translation.norm() < 1e-15);
        let t = rot_z_t(0.9, 0.3, -0.1, 0.2);
        let tt = t.inverse().inverse();
        assert!(se3_distance(&t, &tt, 1.0) < 1e-9);
    }

    #[test]
    fn inverse_hand_evaluated() {
        // inverse(rotZ(pi/2)+t(1,0,0)) = rotZ(-pi/2)+t(0,1,0)
        let inv = rot_z_t(FRAC_PI_2, 1.0, 0.0, 0.0).inverse();
        assert_relative_eq!(inv.translation.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(inv.translation.y, 1.0, epsilon = 1e-12);
        let expected = Rotation::rot_z(-FRAC_PI_2);
        assert!(inv.rotation.angle_to(&expected) < 1e-12);
    }

    #[test]
    fn distance_examples() {
        let t = rot_z_t(0.4, 0.1, 0.2, 0.3);
        assert_eq!(se3_distance(&t, &t, 0.7), 0.0);

        let a = RigidTransform::identity();
        let b = RigidTransform::from_translation(3.0, 4.0, 0.0);
        assert_relative_eq!(se3_distance(&a, &b, 1.0), 5.0, epsilon = 1e-12);

        let c = RigidTransform::from_rotation(Rotation::rot_z(FRAC_PI_2));
        assert_relative_eq!(se3_distance(&a, &c, 2.0), PI, epsilon = 1e-9);
    }

    #[test]
    fn exp_zero_and_pure_rotation() {
        let id = RigidTransform::exp(&Twist::zero());
        assert!(id.translation.norm() < 1e-15);
        assert!(id.rotation.angle() < 1e-15);

        let t = RigidTransform::exp(&Twist::new(
            Vector3::new(0.0, 0.0, FRAC_PI_2),
            Vector3::zeros(),
        ));
        assert!(t.translation.norm() < 1e-15);
        assert!(t.rotation.angle_to(&Rotation::rot_z(FRAC_PI_2)) < 1e-12);
    }

    #[test]
    fn log_branch_error_near_pi() {
        let t = RigidTransform::from_rotation(Rotation::rot_z(PI - 1e-9));
        assert!(matches!(t.log(), Err(Error::LogBranchAmbiguity { .. })));
    }

    #[test]
    fn small_angle_paths_agree_at_crossover() {
        // exp at angles straddling the 1e-7 crossover must agree to 1e-10.
        for scale in [0.5, 0.99, 1.01, 2.0] {
            let angle = SMALL_ANGLE * scale;
            let omega = Vector3::new(0.6, -0.48, 0.64).normalize() * angle;
            let r = Rotation::exp(&omega);
            assert_relative_eq!(r.angle(), angle, epsilon = 1e-10);
            let back = r.log().unwrap();
            assert!((back - omega).norm() < 1e-10);
        }
    }

    #[test]
    fn quaternion_parse_rejects_bad_norm() {
        let doc = r#"{"translation":[0,0,0],"quaternion":[1.1,0,0,0]}"#;
        assert!(serde_json::from_str::<RigidTransform>(doc).is_err());
        let ok = r#"{"translation":[1,2,3],"quaternion":[1,0,0,0]}"#;
        let t: RigidTransform = serde_json::from_str(ok).unwrap();
        assert_eq!(t.translation.x, 1.0);
    }

    #[test]
    fn serde_round_trip() {
        let t = rot_z_t(0.3, 0.01, -0.02, 0.5);
        let json = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&json).unwrap();
        assert!(se3_distance(&t, &back, 1.0) < 1e-12);
    }
}
