//! Fiducial-exoskeleton geometry and detection ingest.
//!
//! A marker detection gives the marker pose in the camera frame; the
//! registry's fixed marker-to-exoskeleton and exoskeleton-to-link transforms
//! lift it to a link pose. When the base marker is seen, all link poses are
//! re-expressed in the robot base frame.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::kinematics::{KinematicChain, BASE_LINK};

/// One registered exoskeleton piece: which marker observes which link, and
/// the fixed transforms from marker to exoskeleton to link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub link_name: String,
    pub marker_id: u32,
    pub t_aruco_exo: RigidTransform,
    pub t_exo_link: RigidTransform,
}

impl RegistryEntry {
    /// Fixed transform from the marker frame to the link frame.
    pub fn marker_to_link(&self) -> RigidTransform {
        self.t_aruco_exo.compose(&self.t_exo_link)
    }
}

/// Per-link marker registrations, including the base entry used for camera
/// extrinsics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RegistryDoc", into = "RegistryDoc")]
pub struct ExoskeletonRegistry {
    entries: Vec<RegistryEntry>,
    by_marker: HashMap<u32, usize>,
}

#[derive(Serialize, Deserialize)]
struct RegistryDoc {
    entries: Vec<RegistryEntry>,
}

impl TryFrom<RegistryDoc> for ExoskeletonRegistry {
    type Error = Error;
    fn try_from(doc: RegistryDoc) -> Result<Self> {
        ExoskeletonRegistry::new(doc.entries)
    }
}

impl From<ExoskeletonRegistry> for RegistryDoc {
    fn from(r: ExoskeletonRegistry) -> RegistryDoc {
        RegistryDoc { entries: r.entries }
    }
}

impl ExoskeletonRegistry {
    pub fn new(entries: Vec<RegistryEntry>) -> Result<Self> {
        let mut by_marker = HashMap::new();
        let mut names = std::collections::HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if by_marker.insert(e.marker_id, i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate marker id {}",
                    e.marker_id
                )));
            }
            if !names.insert(e.link_name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate registry link '{}'",
                    e.link_name
                )));
            }
        }
        Ok(ExoskeletonRegistry { entries, by_marker })
    }

    /// Every registered link name must exist in the chain (or be the base).
    pub fn validate_against(&self, chain: &KinematicChain) -> Result<()> {
        for e in &self.entries {
            if chain.link_index(&e.link_name).is_none() {
                return Err(Error::Validation(format!(
                    "registry link '{}' not in chain",
                    e.link_name
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn entry_for_marker(&self, marker_id: u32) -> Result<&RegistryEntry> {
        self.by_marker
            .get(&marker_id)
            .map(|&i| &self.entries[i])
            .ok_or(Error::UnknownMarker(marker_id))
    }

    pub fn entry_for_link(&self, link_name: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.link_name == link_name)
    }

    pub fn base_entry(&self) -> Option<&RegistryEntry> {
        self.entry_for_link(BASE_LINK)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            context: "registry document".into(),
            message: e.to_string(),
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A marker pose in the camera frame with detector confidence in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerDetection {
    pub marker_id: u32,
    /// T_cam_aruco.
    #[serde(flatten)]
    pub pose: RigidTransform,
    pub confidence: f64,
}

/// One camera frame of detections, as stored in a detections file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame_id: u64,
    pub detections: Vec<MarkerDetection>,
}

impl DetectionFrame {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            context: "detections document".into(),
            message: e.to_string(),
        })
    }
}

/// Observed link poses in the robot base frame (Eq. 2's observation set),
/// plus the raw base-marker camera-frame pose when seen.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    link_names: Vec<String>,
    /// Index j-1 holds link j's observed pose in the robot base frame.
    link_poses: Vec<Option<RigidTransform>>,
    /// Raw T_cam_aruco of the base marker.
    base_marker_cam: Option<RigidTransform>,
    /// Composed robot-base pose in the camera frame.
    base_link_cam: Option<RigidTransform>,
}

impl ObservationSet {
    pub fn dof(&self) -> usize {
        self.link_poses.len()
    }

    pub fn link_names(&self) -> &[String] {
        &self.link_names
    }

    /// Observed pose of link `j` (1-based) in the robot base frame.
    pub fn link_pose(&self, j: usize) -> Option<&RigidTransform> {
        self.link_poses.get(j - 1).and_then(|p| p.as_ref())
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.link_pose(j).is_some()
    }

    pub fn visible_links(&self) -> Vec<usize> {
        (1..=self.dof()).filter(|&j| self.is_visible(j)).collect()
    }

    pub fn visible_count(&self) -> usize {
        self.link_poses.iter().filter(|p| p.is_some()).count()
    }

    pub fn base_marker_cam(&self) -> Option<&RigidTransform> {
        self.base_marker_cam.as_ref()
    }

    pub fn base_link_cam(&self) -> Option<&RigidTransform> {
        self.base_link_cam.as_ref()
    }
}

/// Lifts one marker detection to its link's pose in the camera frame:
/// `T_cam_aruco * T_aruco_exo * T_exo_link`.
pub fn link_pose_from_marker(
    det: &MarkerDetection,
    reg: &ExoskeletonRegistry,
) -> Result<RigidTransform> {
    let entry = reg.entry_for_marker(det.marker_id)?;
    Ok(det.pose.compose(&entry.marker_to_link()))
}

/// Converts raw detections into robot-base-frame link observations.
///
/// Duplicate detections of one marker resolve to the highest confidence;
/// detections below `min_confidence` are dropped. If the base marker is
/// present every link pose is premultiplied by the inverse of the base link
/// pose; link detections without a visible base are an error.
pub fn build_observation_set(
    dets: &[MarkerDetection],
    reg: &ExoskeletonRegistry,
    chain: &KinematicChain,
    min_confidence: f64,
) -> Result<ObservationSet> {
    reg.validate_against(chain)?;
    let d = chain.dof();
    let link_names: Vec<String> = chain
        .link_names()
        .iter()
        .skip(1)
        .map(|s| s.to_string())
        .collect();

    // Best detection per marker id.
    let mut best: HashMap<u32, &MarkerDetection> = HashMap::new();
    for det in dets {
        if det.confidence < min_confidence {
            continue;
        }
        reg.entry_for_marker(det.marker_id)?; // unknown ids are an error
        match best.get(&det.marker_id) {
            Some(prev) if prev.confidence >= det.confidence => {}
            _ => {
                best.insert(det.marker_id, det);
            }
        }
    }

    let base_id = reg.base_entry().map(|e| e.marker_id);
    let base_det = base_id.and_then(|id| best.get(&id).copied());

    let mut cam_frame: Vec<Option<RigidTransform>> = vec![None; d];
    let mut any_link = false;
    for det in best.values() {
        let entry = reg.entry_for_marker(det.marker_id)?;
        if entry.link_name == BASE_LINK {
            continue;
        }
        let j = chain
            .link_index(&entry.link_name)
            .expect("validated against chain");
        cam_frame[j - 1] = Some(link_pose_from_marker(det, reg)?);
        any_link = true;
    }

    let (base_marker_cam, base_link_cam) = match base_det {
        Some(det) => {
            let base_pose = link_pose_from_marker(det, reg)?;
            (Some(det.pose), Some(base_pose))
        }
        None => {
            if any_link {
                return Err(Error::BaseUnobserved);
            }
            (None, None)
        }
    };

    let link_poses = match &base_link_cam {
        Some(base) => {
            let base_inv = base.inverse();
            cam_frame
                .into_iter()
                .map(|p| p.map(|pose| base_inv.compose(&pose)))
                .collect()
        }
        None => cam_frame,
    };

    Ok(ObservationSet {
        link_names,
        link_poses,
        base_marker_cam,
        base_link_cam,
    })
}

use crate::kinematics::JointVector;

/// Builds a noiseless observation set directly from known joint angles,
/// with every link visible. Useful for fixtures and round-trip checks.
pub fn observation_from_theta(
    chain: &KinematicChain,
    theta: &JointVector,
) -> Result<ObservationSet> {
    let poses = chain.forward_kinematics(theta)?;
    Ok(ObservationSet {
        link_names: chain
            .link_names()
            .iter()
            .skip(1)
            .map(|s| s.to_string())
            .collect(),
        link_poses: poses.into_iter().map(Some).collect(),
        base_marker_cam: None,
        base_link_cam: None,
    })
}

/// Observation set with an explicit visibility mask (1-based link indices).
pub fn observation_from_theta_masked(
    chain: &KinematicChain,
    theta: &JointVector,
    visible: &[usize],
) -> Result<ObservationSet> {
    let mut obs = observation_from_theta(chain, theta)?;
    for j in 1..=obs.dof() {
        if !visible.contains(&j) {
            obs.link_poses[j - 1] = None;
        }
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_distance, Rotation};
    use crate::kinematics::sample_six_dof_chain;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    fn sample_registry() -> ExoskeletonRegistry {
        ExoskeletonRegistry::from_json_str(include_str!("../data/registry_six_dof.json")).unwrap()
    }

    fn det(id: u32, pose: RigidTransform, confidence: f64) -> MarkerDetection {
        MarkerDetection {
            marker_id: id,
            pose,
            confidence,
        }
    }

    #[test]
    fn identity_registry_passes_detection_through() {
        let reg = ExoskeletonRegistry::new(vec![RegistryEntry {
            link_name: "base".into(),
            marker_id: 0,
            t_aruco_exo: RigidTransform::identity(),
            t_exo_link: RigidTransform::identity(),
        }])
        .unwrap();
        let pose = RigidTransform::from_translation(0.1, 0.2, 0.3);
        let out = link_pose_from_marker(&det(0, pose, 1.0), &reg).unwrap();
        assert!(se3_distance(&out, &pose, 1.0) < 1e-12);
    }

    #[test]
    fn marker_chain_hand_evaluated() {
        // T_aruco_exo = t(0,0,-0.02), T_exo_link = rotX(pi), detection identity.
        let reg = ExoskeletonRegistry::new(vec![RegistryEntry {
            link_name: "base".into(),
            marker_id: 7,
            t_aruco_exo: RigidTransform::from_translation(0.0, 0.0, -0.02),
            t_exo_link: RigidTransform::from_rotation(Rotation::rot_x(PI)),
        }])
        .unwrap();
        let out = link_pose_from_marker(&det(7, RigidTransform::identity(), 1.0), &reg).unwrap();
        let expected = RigidTransform::new(Rotation::rot_x(PI), Vector3::new(0.0, 0.0, -0.02));
        assert!(se3_distance(&out, &expected, 1.0) < 1e-12);
    }

    #[test]
    fn unknown_marker_is_an_error() {
        let reg = sample_registry();
        let err = link_pose_from_marker(&det(99, RigidTransform::identity(), 1.0), &reg);
        assert!(matches!(err, Err(Error::UnknownMarker(99))));
    }

    #[test]
    fn empty_detections_all_links_hidden() {
        let chain = sample_six_dof_chain();
        let reg = sample_registry();
        let obs = build_observation_set(&[], &reg, &chain, 0.0).unwrap();
        assert_eq!(obs.visible_count(), 0);
        assert!(obs.base_marker_cam().is_none());
    }

    #[test]
    fn base_only_populates_camera_pose() {
        let chain = sample_six_dof_chain();
        let reg = sample_registry();
        let base_id = reg.base_entry().unwrap().marker_id;
        let pose = RigidTransform::from_translation(0.0, 0.0, 0.4);
        let obs = build_observation_set(&[det(base_id, pose, 1.0)], &reg, &chain, 0.0).unwrap();
        assert_eq!(obs.visible_count(), 0);
        assert!(obs.base_marker_cam().is_some());
    }

    #[test]
    fn link_without_base_is_an_error() {
        let chain = sample_six_dof_chain();
        let reg = sample_registry();
        let link_id = reg.entry_for_link("elbow").unwrap().marker_id;
        let err = build_observation_set(
            &[det(link_id, RigidTransform::identity(), 1.0)],
            &reg,
            &chain,
            0.0,
        );
        assert!(matches!(err, Err(Error::BaseUnobserved)));
    }

    #[test]
    fn duplicate_detections_resolve_by_confidence() {
        let chain = sample_six_dof_chain();
        let reg = sample_registry();
        let base_id = reg.base_entry().unwrap().marker_id;
        let low = RigidTransform::from_translation(9.0, 9.0, 9.0);
        let high = RigidTransform::from_translation(0.0, 0.0, 0.4);
        let obs = build_observation_set(
            &[det(base_id, low, 0.2), det(base_id, high, 0.9)],
            &reg,
            &chain,
            0.0,
        )
        .unwrap();
        assert!(se3_distance(obs.base_marker_cam().unwrap(), &high, 1.0) < 1e-12);
    }

    #[test]
    fn equivariance_under_left_multiplication() {
        let reg = sample_registry();
        let base = reg.base_entry().unwrap();
        let pose = RigidTransform::new(Rotation::rot_y(0.3), Vector3::new(0.1, -0.2, 0.5));
        let g = RigidTransform::new(Rotation::rot_z(0.8), Vector3::new(0.3, 0.0, -0.1));
        let out = link_pose_from_marker(&det(base.marker_id, pose, 1.0), &reg).unwrap();
        let out_g =
            link_pose_from_marker(&det(base.marker_id, g.compose(&pose), 1.0), &reg).unwrap();
        assert!(se3_distance(&out_g, &g.compose(&out), 1.0) < 1e-12);
    }
}
