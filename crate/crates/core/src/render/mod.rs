//! Z-buffer depth rasterization and per-instance ground truth.

use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box2D, MeshModel, Pose6D};
use crate::scenegen::{CameraView, Intrinsics, SceneInstance};

const MAGIC: &[u8; 4] = b"BPD1";
const NO_OWNER: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    /// Standard deviation of additive depth noise in meters; 0 disables it.
    pub noise_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            near: 0.1,
            far: 4.0,
            noise_sigma: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Config(format!(
                "clip planes must satisfy 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Row-major depth map in meters; background pixels hold the far plane.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
}

impl DepthImage {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.width + col]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.depth.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for d in &self.depth {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Data("not a BPD1 depth file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (width, height) = (word(4), word(8));
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(12));
        if expected != Some(bytes.len()) {
            return Err(Error::Data(format!(
                "depth file size {} does not match {width}x{height}",
                bytes.len()
            )));
        }
        let depth = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DepthImage { width, height, depth })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Depth and owner buffers shared by all draws of one frame.
#[derive(Clone, Debug)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub owner: Vec<u32>,
    far: f64,
}

impl Raster {
    pub fn new(width: usize, height: usize, far: f64) -> Self {
        Raster {
            width,
            height,
            depth: vec![far; width * height],
            owner: vec![NO_OWNER; width * height],
            far,
        }
    }

    /// Draws camera-frame triangles. Pixel `(row i, col j)` samples the image
    /// point `(j + 0.5, i + 0.5)`; a fragment replaces the stored one only if
    /// strictly nearer. Triangles crossing the near plane are dropped.
    pub fn draw(
        &mut self,
        vertices: &[Vector3<f64>],
        triangles: &[[u32; 3]],
        intr: &Intrinsics,
        near: f64,
        id: u32,
    ) {
        let proj: Vec<(f64, f64, f64)> = vertices
            .iter()
            .map(|p| {
                let (u, v) = intr.project(p);
                (u, v, p.z)
            })
            .collect();
        for tri in triangles {
            let [a, b, c] = tri.map(|k| proj[k as usize]);
            if a.2 < near || b.2 < near || c.2 < near {
                continue;
            }
            let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            if area.abs() < 1e-12 {
                continue;
            }
            let umin = a.0.min(b.0).min(c.0);
            let umax = a.0.max(b.0).max(c.0);
            let vmin = a.1.min(b.1).min(c.1);
            let vmax = a.1.max(b.1).max(c.1);
            let j0 = (umin - 0.5).ceil().max(0.0);
            let j1 = (umax - 0.5).floor().min(self.width as f64 - 1.0);
            let i0 = (vmin - 0.5).ceil().max(0.0);
            let i1 = (vmax - 0.5).floor().min(self.height as f64 - 1.0);
            if j0 > j1 || i0 > i1 {
                continue;
            }
            let (inv_a, inv_b, inv_c) = (1.0 / a.2, 1.0 / b.2, 1.0 / c.2);
            for i in i0 as usize..=i1 as usize {
                let y = i as f64 + 0.5;
                for j in j0 as usize..=j1 as usize {
                    let x = j as f64 + 0.5;
                    let wa = ((b.0 - x) * (c.1 - y) - (b.1 - y) * (c.0 - x)) / area;
                    let wb = ((c.0 - x) * (a.1 - y) - (c.1 - y) * (a.0 - x)) / area;
                    let wc = 1.0 - wa - wb;
                    if wa < 0.0 || wb < 0.0 || wc < 0.0 {
                        continue;
                    }
                    let z = 1.0 / (wa * inv_a + wb * inv_b + wc * inv_c);
                    let k = i * self.width + j;
                    if z < self.depth[k] && z <= self.far {
                        self.depth[k] = z;
                        self.owner[k] = id;
                    }
                }
            }
        }
    }

    pub fn draw_posed(&mut self, model: &MeshModel, pose: &Pose6D, intr: &Intrinsics, near: f64, id: u32) {
        let vertices: Vec<Vector3<f64>> = model.vertices.iter().map(|v| pose.transform(v)).collect();
        self.draw(&vertices, &model.triangles, intr, near, id);
    }

    pub fn owner_at(&self, k: usize) -> Option<u32> {
        (self.owner[k] != NO_OWNER).then_some(self.owner[k])
    }

    pub fn to_image(&self) -> DepthImage {
        DepthImage {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|&d| d as f32).collect(),
        }
    }
}

fn check_view(view: &CameraView) -> Result<()> {
    let k = &view.intrinsics;
    let finite = [k.fx, k.fy, k.cx, k.cy].iter().all(|v| v.is_finite());
    if !finite || k.fx <= 0.0 || k.fy <= 0.0 || view.width == 0 || view.height == 0 {
        return Err(Error::Config(format!(
            "degenerate intrinsics fx={} fy={} size {}x{}",
            k.fx, k.fy, view.width, view.height
        )));
    }
    Ok(())
}

/// Camera-frame poses of every scene instance.
pub fn camera_poses(instances: &[SceneInstance], view: &CameraView) -> Result<Vec<Pose6D>> {
    instances.iter().map(|i| view.to_camera(&i.pose)).collect()
}

fn render_raster(poses: &[Pose6D], view: &CameraView, model: &MeshModel, cfg: &RenderConfig) -> Result<Raster> {
    check_view(view)?;
    cfg.validate()?;
    let mut raster = Raster::new(view.width, view.height, cfg.far);
    for (id, pose) in poses.iter().enumerate() {
        raster.draw_posed(model, pose, &view.intrinsics, cfg.near, id as u32);
    }
    Ok(raster)
}

pub fn rasterize_depth(
    instances: &[SceneInstance],
    view: &CameraView,
    model: &MeshModel,
    cfg: &RenderConfig,
) -> Result<DepthImage> {
    let poses = camera_poses(instances, view)?;
    Ok(render_raster(&poses, view, model, cfg)?.to_image())
}

/// Adds zero-mean Gaussian noise to foreground pixels, clamped to the clip range.
pub fn add_depth_noise(image: &mut DepthImage, cfg: &RenderConfig, seed: u64) -> Result<()> {
    if cfg.noise_sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let far = cfg.far as f32;
    for d in image.depth.iter_mut().filter(|d| **d < far) {
        *d = (*d as f64 + normal.sample(&mut rng)).clamp(cfg.near, cfg.far) as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    /// Index of the instance in its scene.
    pub instance: usize,
    /// Bounds of the full (unoccluded) silhouette, in pixels.
    pub bbox: Box2D,
    pub center2d: [f64; 2],
    /// Set when the projected model origin falls outside `bbox`.
    pub center_outside: bool,
    pub center_depth: f64,
    /// Camera frame.
    pub pose: Pose6D,
    pub visibility: f64,
    pub visible_pixels: usize,
    pub solo_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub view: CameraView,
    pub instances: Vec<InstanceAnnotation>,
}

/// Pixel count and tight pixel bounds of a single instance rendered alone.
pub fn solo_silhouette(
    model: &MeshModel,
    pose: &Pose6D,
    view: &CameraView,
    cfg: &RenderConfig,
) -> Result<Option<(usize, Box2D)>> {
    let raster = render_raster(std::slice::from_ref(pose), view, model, cfg)?;
    let mut count = 0;
    let (mut j0, mut j1, mut i0, mut i1) = (usize::MAX, 0, usize::MAX, 0);
    for (k, o) in raster.owner.iter().enumerate() {
        if *o == NO_OWNER {
            continue;
        }
        let (i, j) = (k / raster.width, k % raster.width);
        count += 1;
        j0 = j0.min(j);
        j1 = j1.max(j);
        i0 = i0.min(i);
        i1 = i1.max(i);
    }
    Ok((count > 0).then(|| {
        (
            count,
            Box2D::from_corners(j0 as f64, i0 as f64, j1 as f64 + 1.0, i1 as f64 + 1.0),
        )
    }))
}

/// Renders the frame and derives per-instance ground truth.
pub fn annotate(
    instances: &[SceneInstance],
    view: &CameraView,
    model: &MeshModel,
    cfg: &RenderConfig,
) -> Result<(DepthImage, FrameAnnotation)> {
    let poses = camera_poses(instances, view)?;
    let joint = render_raster(&poses, view, model, cfg)?;
    let mut visible = vec![0usize; poses.len()];
    for o in joint.owner.iter().filter(|o| **o != NO_OWNER) {
        visible[*o as usize] += 1;
    }
    let mut annotations = Vec::new();
    for (idx, pose) in poses.iter().enumerate() {
        if visible[idx] == 0 {
            continue;
        }
        let Some((solo, bbox)) = solo_silhouette(model, pose, view, cfg)? else {
            continue;
        };
        let (u, v) = view.intrinsics.project(&pose.t);
        let (x0, y0) = (bbox.c_x, bbox.c_y);
        let outside = u < x0 || u > x0 + bbox.w || v < y0 || v > y0 + bbox.h;
        annotations.push(InstanceAnnotation {
            instance: idx,
            bbox,
            center2d: [u, v],
            center_outside: outside,
            center_depth: pose.t.z,
            pose: *pose,
            visibility: visible[idx] as f64 / solo as f64,
            visible_pixels: visible[idx],
            solo_pixels: solo,
        });
    }
    Ok((
        joint.to_image(),
        FrameAnnotation {
            view: view.clone(),
            instances: annotations,
        },
    ))
}
