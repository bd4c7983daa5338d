use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::MeshModel;
use crate::render::{add_depth_noise, annotate, DepthImage, FrameAnnotation};
use crate::scenegen::{derive_seed, generate_scene, sample_views, CollisionProxy, Scene};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub depth: String,
    pub annotation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub split: Split,
    pub scene_file: String,
    pub instances: usize,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn frames(&self, split: Split) -> impl Iterator<Item = &FrameEntry> {
        self.scenes
            .iter()
            .filter(move |s| s.split == split)
            .flat_map(|s| s.frames.iter())
    }
}

/// A rendered view and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: DepthImage,
    pub annotation: FrameAnnotation,
}

pub fn frame_id(scene: usize, view: usize) -> String {
    format!("{scene:05}_{view:02}")
}

/// Scene `index` with all of its rendered views, fully determined by the config seed.
pub fn generate_scene_frames(
    cfg: &RunConfig,
    model: &MeshModel,
    proxy: &CollisionProxy,
    index: usize,
) -> Result<(Scene, Vec<Frame>)> {
    let scene_seed = derive_seed(cfg.seed, 2 * index as u64);
    let view_seed = derive_seed(cfg.seed, 2 * index as u64 + 1);
    let instances = generate_scene(&cfg.scene, proxy, scene_seed)
        .map_err(|e| Error::Data(format!("scene {index}: {e}")))?;
    let views = sample_views(&cfg.views, cfg.scene.bin_diagonal(), view_seed)?;
    let mut frames = Vec::with_capacity(views.len());
    for (v, view) in views.iter().enumerate() {
        let (mut image, annotation) = annotate(&instances, view, model, &cfg.render)?;
        add_depth_noise(&mut image, &cfg.render, derive_seed(view_seed, v as u64))?;
        frames.push(Frame {
            id: frame_id(index, v),
            image,
            annotation,
        });
    }
    let scene = Scene {
        index,
        seed: scene_seed,
        instances,
        views,
    };
    Ok((scene, frames))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes scenes, depth frames, annotations and the manifest under `dir`.
pub fn generate_dataset(cfg: &RunConfig, model: &MeshModel, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["scenes", "frames"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let proxy = CollisionProxy::fit(model, cfg.scene.collision_spheres, cfg.dataset.proxy_grid);
    let total = cfg.dataset.train_scenes + cfg.dataset.test_scenes;
    let scenes = (0..total)
        .into_par_iter()
        .map(|index| -> Result<SceneEntry> {
            let (scene, frames) = generate_scene_frames(cfg, model, &proxy, index)?;
            let scene_file = format!("scenes/{}", Scene::file_name(index));
            write_json(&dir.join(&scene_file), &scene)?;
            let mut entries = Vec::with_capacity(frames.len());
            for f in &frames {
                let entry = FrameEntry {
                    id: f.id.clone(),
                    depth: format!("frames/{}.bpd", f.id),
                    annotation: format!("frames/{}.json", f.id),
                };
                f.image.write(&dir.join(&entry.depth))?;
                write_json(&dir.join(&entry.annotation), &f.annotation)?;
                entries.push(entry);
            }
            log::debug!("scene {index}: {} instances", scene.instances.len());
            Ok(SceneEntry {
                index,
                split: if index < cfg.dataset.train_scenes { Split::Train } else { Split::Test },
                scene_file,
                instances: scene.instances.len(),
                frames: entries,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        config_hash: cfg.dataset_hash(),
        seed: cfg.seed,
        model: model.name.clone(),
        scenes,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Reads the manifest, checking the config hash and that every file exists.
pub fn load_manifest(cfg: &RunConfig, dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.config_hash != cfg.dataset_hash() {
        return Err(Error::Data(format!(
            "dataset in {} was generated with a different configuration",
            dir.display()
        )));
    }
    for s in &manifest.scenes {
        let files = std::iter::once(&s.scene_file).chain(s.frames.iter().flat_map(|f| [&f.depth, &f.annotation]));
        for f in files {
            if !dir.join(f).is_file() {
                return Err(Error::Data(format!("dataset file {f} is missing")));
            }
        }
    }
    Ok(manifest)
}

pub fn load_frames(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Frame>> {
    manifest
        .frames(split)
        .map(|e| {
            Ok(Frame {
                id: e.id.clone(),
                image: DepthImage::read(&dir.join(&e.depth))?,
                annotation: read_json(&dir.join(&e.annotation))?,
            })
        })
        .collect()
}

/// In-memory dataset for the given scene indices.
pub fn generate_frames(cfg: &RunConfig, model: &MeshModel, indices: std::ops::Range<usize>) -> Result<Vec<Frame>> {
    let proxy = CollisionProxy::fit(model, cfg.scene.collision_spheres, cfg.dataset.proxy_grid);
    let per_scene = indices
        .into_par_iter()
        .map(|i| generate_scene_frames(cfg, model, &proxy, i).map(|(_, f)| f))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}
