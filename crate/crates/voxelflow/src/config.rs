//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxelflow_core::detector::HeadConfig;
use voxelflow_core::eval::EvalConfig;
use voxelflow_core::fsm::FsmConfig;
use voxelflow_core::model::{BackboneConfig, DffmConfig, ModelConfig};
use voxelflow_core::scene::SceneConfig;
use voxelflow_core::voxel::{AugmentConfig, VoxelConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Synthetic training scenes, visited round robin.
    pub scenes: usize,
    /// Random flip/rotation/scale and ground-truth sampling per step.
    pub augment: bool,
    /// Seed of the augmentation stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.003,
            weight_decay: 0.01,
            scenes: 1,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.scenes == 0 {
            return Err(Error::Config("train.scenes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Occupancies compared by the `flops` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    /// Width of every layer in the comparison.
    pub channels: usize,
    /// Edge lengths of fully dense cubes.
    pub cube_sizes: Vec<usize>,
    /// Also compare on the voxelized synthetic scene of the `scene` section.
    pub synthetic: bool,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        FlopsConfig {
            channels: 16,
            cube_sizes: (3..=12).collect(),
            synthetic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "VoxelConfig::toy")]
    pub voxel: VoxelConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub dffm: DffmConfig,
    pub fsm: FsmConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub scene: SceneConfig,
    pub flops: FlopsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            voxel: VoxelConfig::toy(),
            augment: AugmentConfig::default(),
            backbone: BackboneConfig::default(),
            dffm: DffmConfig::default(),
            fsm: FsmConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            scene: SceneConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.scene.validate()?;
        if self.flops.channels == 0 {
            return Err(Error::Config("flops.channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            voxel: self.voxel.clone(),
            backbone: self.backbone.clone(),
            dffm: self.dffm.clone(),
            fsm: self.fsm.clone(),
            head: self.head.clone(),
        }
    }

    /// One seed for initialization, scene generation and augmentation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.backbone.init_seed = seed;
        self.scene.seed = seed;
        self.train.seed = seed;
        self
    }
}
