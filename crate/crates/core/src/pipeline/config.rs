use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::geometry::{MeshModel, SymmetrySpec};
use crate::jointreg::JointRegConfig;
use crate::posehyp::HeadConfig;
use crate::render::RenderConfig;
use crate::scenegen::{SceneConfig, ViewConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Built-in model name, or the name given to `mesh_path`.
    pub name: String,
    /// Optional BPMESH file; overrides the built-in geometry.
    pub mesh_path: Option<PathBuf>,
    /// Symmetry of a loaded mesh as `[axis_x, axis_y, axis_z, degrees]` rotations.
    pub finite_rotations: Vec<[f64; 4]>,
    pub axial_axis: Option<[f64; 3]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "tripod".into(),
            mesh_path: None,
            finite_rotations: vec![],
            axial_axis: None,
        }
    }
}

impl ModelConfig {
    pub fn load(&self, base: &Path) -> Result<MeshModel> {
        let Some(rel) = &self.mesh_path else {
            return MeshModel::builtin(&self.name);
        };
        let path = base.join(rel);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let finite = self
            .finite_rotations
            .iter()
            .map(|r| {
                let axis = Unit::try_new(Vector3::new(r[0], r[1], r[2]), 1e-12)
                    .ok_or_else(|| Error::Config("symmetry rotation axis is zero".into()))?;
                Ok(Rotation3::from_axis_angle(&axis, r[3].to_radians()).into_inner())
            })
            .collect::<Result<Vec<_>>>()?;
        let axial = self.axial_axis.map(|a| Vector3::from(a).normalize());
        let sym = SymmetrySpec::new(finite, axial).map_err(|e| Error::Config(e.to_string()))?;
        MeshModel::from_bpmesh(&self.name, &text, sym)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Grid resolution used to fit the collision spheres.
    pub proxy_grid: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_scenes: 50,
            test_scenes: 20,
            proxy_grid: 14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseHypConfig {
    pub top_k: usize,
    pub per_detection: usize,
    /// Pose NMS radius as a fraction of the bounding-sphere diameter.
    pub nms_factor: f64,
    /// Depth class range in meters; defaults to the camera radius range
    /// widened by one bin diagonal on each side.
    pub depth_range: Option<[f64; 2]>,
    /// Decode centers with the offset head instead of the box center.
    pub use_offset: bool,
}

impl Default for PoseHypConfig {
    fn default() -> Self {
        PoseHypConfig {
            top_k: 3,
            per_detection: 5,
            nms_factor: 0.05,
            depth_range: None,
            use_offset: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub heads_steps: usize,
    pub jointreg_steps: usize,
    pub weight_detection: f64,
    pub weight_offset: f64,
    pub weight_depth: f64,
    pub weight_pose: f64,
    /// Relative shift / scale range of jittered training boxes.
    pub jitter: f64,
    pub jitter_boxes: usize,
    pub max_rois: usize,
    /// Instances below this visibility are not detection or head targets.
    pub min_visibility: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            heads_steps: 4000,
            jointreg_steps: 1500,
            weight_detection: 1.0,
            weight_offset: 1.0,
            weight_depth: 1.0,
            weight_pose: 1.0,
            jitter: 0.2,
            jitter_boxes: 2,
            max_rois: 40,
            min_visibility: 0.25,
        }
    }
}

/// Every tunable of a run, read from TOML; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub scene: SceneConfig,
    pub views: ViewConfig,
    pub render: RenderConfig,
    pub detect: DetectConfig,
    pub posehyp: PoseHypConfig,
    pub train: TrainConfig,
    pub jointreg: JointRegConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.views.validate()?;
        self.render.validate()?;
        self.detect.validate()?;
        self.jointreg.validate()?;
        self.eval.validate()?;
        if !self.views.width.is_multiple_of(crate::detect::STRIDE) || !self.views.height.is_multiple_of(crate::detect::STRIDE) {
            return Err(Error::Config(format!(
                "image size must be a multiple of {}",
                crate::detect::STRIDE
            )));
        }
        if self.posehyp.top_k == 0 || self.posehyp.per_detection == 0 {
            return Err(Error::Config("posehyp top_k and per_detection must be at least 1".into()));
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some([lo, hi]) = self.posehyp.depth_range {
            if !(0.0 < lo && lo < hi) {
                return Err(Error::Config("depth range must satisfy 0 < lo < hi".into()));
            }
        }
        Ok(())
    }

    pub fn depth_range(&self) -> [f64; 2] {
        self.posehyp.depth_range.unwrap_or_else(|| {
            let d = self.scene.bin_diagonal();
            [
                self.views.radius_factor[0] * d - d,
                self.views.radius_factor[1] * d + d,
            ]
        })
    }

    pub fn head_config(&self, model: &MeshModel) -> Result<HeadConfig> {
        let [lo, hi] = self.depth_range();
        HeadConfig::for_model(model, lo, hi)
    }

    /// Digest of everything that determines the generated dataset.
    pub fn dataset_hash(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "model": self.model,
            "dataset": self.dataset,
            "scene": self.scene,
            "views": self.views,
            "render": self.render,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}
