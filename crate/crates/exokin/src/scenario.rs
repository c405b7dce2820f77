//! Scenario files: a chain + registry reference, a noise model, a camera
//! pose, and an optional command episode with per-step occlusion.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::kinematics::{JointVector, KinematicChain};
use crate::observation::ExoskeletonRegistry;
use crate::simulator::NoiseModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioDoc {
    /// Path to the chain document, relative to the scenario file.
    pub chain_ref: String,
    /// Path to the registry document, relative to the scenario file.
    pub registry_ref: String,
    pub noise_model: NoiseModel,
    /// Camera pose in the robot base frame.
    pub camera_pose: RigidTransform,
    #[serde(default)]
    pub initial_theta: Option<Vec<f64>>,
    /// Joint-space commands, one per step.
    #[serde(default)]
    pub episode: Vec<Vec<f64>>,
    /// Optional extra hidden link names per step; padded with no occlusion.
    #[serde(default)]
    pub occlusion_schedule: Option<Vec<Vec<String>>>,
}

/// A scenario with its references resolved and validated.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub doc: ScenarioDoc,
    pub chain: KinematicChain,
    pub registry: ExoskeletonRegistry,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        let doc: ScenarioDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: format!("scenario {}", path.display()),
            message: e.to_string(),
        })?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let chain = load_chain_file(&dir.join(&doc.chain_ref))?;
        let registry = load_registry_file(&dir.join(&doc.registry_ref))?;
        registry.validate_against(&chain)?;
        doc.noise_model.validate(chain.dof())?;
        if let Some(init) = &doc.initial_theta {
            chain.check_theta(&JointVector(init.clone()))?;
        }
        for step in &doc.episode {
            chain.check_theta(&JointVector(step.clone()))?;
        }
        Ok(Scenario {
            doc,
            chain,
            registry,
        })
    }

    pub fn initial_theta(&self) -> JointVector {
        self.doc
            .initial_theta
            .clone()
            .map(JointVector)
            .unwrap_or_else(|| JointVector::zeros(self.chain.dof()))
    }
}

pub fn load_chain_file(path: &PathBuf) -> Result<KinematicChain> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        context: format!("chain {}", path.display()),
        message: e.to_string(),
    })?;
    KinematicChain::from_json_str(&text)
}

pub fn load_registry_file(path: &PathBuf) -> Result<ExoskeletonRegistry> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        context: format!("registry {}", path.display()),
        message: e.to_string(),
    })?;
    ExoskeletonRegistry::from_json_str(&text)
}
