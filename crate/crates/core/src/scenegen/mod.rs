//! Randomized drop-and-settle bin scenes and camera view sampling.
//!
//! World frame: the bin floor is the plane `z = 0`, the interior spans
//! `|x| <= hx`, `|y| <= hy`, `0 <= z <= 2 hz`, gravity points along `-z`.
//! Cameras aim at the center of the bin floor (the world origin).

mod proxy;
mod settle;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose6D;
pub use proxy::CollisionProxy;
pub use settle::{max_penetration, posed_spheres, random_rotation, BinBounds, Sphere};
use settle::{drop_instance, SettleParams};

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub bin_half_extents: [f64; 3],
    pub n_min: usize,
    pub n_max: usize,
    pub settle_iterations: usize,
    /// Meters.
    pub penetration_tolerance: f64,
    pub gravity_step: f64,
    pub collision_spheres: usize,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            bin_half_extents: [0.15, 0.15, 0.1],
            n_min: 10,
            n_max: 20,
            settle_iterations: 3000,
            penetration_tolerance: 5e-4,
            gravity_step: 2e-3,
            collision_spheres: 8,
            max_retries: 8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "instance range [{}, {}] is empty",
                self.n_min, self.n_max
            )));
        }
        if self.penetration_tolerance <= 0.0 || self.gravity_step <= 0.0 {
            return Err(Error::Config("penetration tolerance and gravity step must be positive".into()));
        }
        if self.bin_half_extents.iter().any(|h| *h <= 0.0) {
            return Err(Error::Config("bin half extents must be positive".into()));
        }
        Ok(())
    }

    pub fn bin(&self) -> BinBounds {
        BinBounds {
            half_extents: Vector3::from(self.bin_half_extents),
        }
    }

    /// Full diagonal of the bin box.
    pub fn bin_diagonal(&self) -> f64 {
        2.0 * Vector3::from(self.bin_half_extents).norm()
    }
}

/// One settled object, posed in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub pose: Pose6D,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Pinhole back-projection of pixel `(u, v)` at depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

/// Pinhole camera: `p_cam = rotation * p_world + translation`; the camera
/// looks along its +z axis with +x right and +y down in the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis direction in world coordinates.
    pub fn axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Re-expresses a world pose in this camera's frame.
    pub fn to_camera(&self, world: &Pose6D) -> Result<Pose6D> {
        Pose6D::from_rotation(
            &(self.rotation * world.rotation()),
            self.rotation * world.t + self.translation,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub count: usize,
    /// Camera distance range as multiples of the bin diagonal.
    pub radius_factor: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            count: 17,
            radius_factor: [2.0, 3.0],
            elevation_deg: [30.0, 90.0],
            width: 128,
            height: 128,
            fx: 300.0,
            fy: 300.0,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("view count must be at least 1".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("intrinsics and image size must be positive".into()));
        }
        if self.radius_factor[0] <= 0.0 || self.radius_factor[0] > self.radius_factor[1] {
            return Err(Error::Config("invalid camera radius range".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }
}

/// Drops `n ~ U[n_min, n_max]` instances one after another into the bin.
///
/// A scene whose instance fails to settle is discarded and regenerated from
/// the next derived seed, up to `max_retries` times.
pub fn generate_scene(
    cfg: &SceneConfig,
    proxy: &CollisionProxy,
    seed: u64,
) -> Result<Vec<SceneInstance>> {
    cfg.validate()?;
    let bin = cfg.bin();
    let params = SettleParams {
        iterations: cfg.settle_iterations,
        tolerance: cfg.penetration_tolerance,
        gravity_step: cfg.gravity_step,
    };
    let reach = proxy.reach();
    'attempt: for attempt in 0..=cfg.max_retries {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt as u64));
        let n = rng.random_range(cfg.n_min..=cfg.n_max);
        let mut settled: Vec<Sphere> = vec![];
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let rot = random_rotation(&mut rng);
            let span = |h: f64| (h - reach).max(1e-3);
            let x = rng.random_range(-span(bin.half_extents.x)..span(bin.half_extents.x));
            let y = rng.random_range(-span(bin.half_extents.y)..span(bin.half_extents.y));
            let top = settled
                .iter()
                .map(|s| s.center.z + s.radius)
                .fold(0.0, f64::max);
            let start = Pose6D::from_rotation(&rot, Vector3::new(x, y, top + reach + 0.01))?;
            match drop_instance(proxy, start, &settled, &bin, &params) {
                Some(pose) => {
                    settled.extend(posed_spheres(proxy, &pose));
                    instances.push(SceneInstance { pose });
                }
                None => {
                    log::debug!("scene seed {seed}: attempt {attempt} failed to settle");
                    continue 'attempt;
                }
            }
        }
        return Ok(instances);
    }
    Err(Error::Data(format!(
        "scene with seed {seed} failed to settle after {} attempts",
        cfg.max_retries + 1
    )))
}

/// Cameras on a hemisphere above the bin, aimed at the floor center, with a
/// uniformly random in-plane roll.
pub fn sample_views(cfg: &ViewConfig, bin_diagonal: f64, seed: u64) -> Result<Vec<CameraView>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Vector3::zeros();
    let mut views = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let radius = bin_diagonal * rng.random_range(cfg.radius_factor[0]..=cfg.radius_factor[1]);
        let elev = rng
            .random_range(cfg.elevation_deg[0]..=cfg.elevation_deg[1])
            .to_radians();
        let azim = rng.random_range(0.0..std::f64::consts::TAU);
        let roll = rng.random_range(0.0..std::f64::consts::TAU);
        let position = target
            + radius * Vector3::new(elev.cos() * azim.cos(), elev.cos() * azim.sin(), elev.sin());
        let z = (target - position).normalize();
        let reference = if z.z.abs() < 0.99 { Vector3::z() } else { Vector3::x() };
        let x0 = z.cross(&reference).normalize();
        let y0 = z.cross(&x0);
        let (s, c) = roll.sin_cos();
        let x = c * x0 + s * y0;
        let y = -s * x0 + c * y0;
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        views.push(CameraView {
            rotation,
            translation: -(rotation * position),
            intrinsics: cfg.intrinsics(),
            width: cfg.width,
            height: cfg.height,
        });
    }
    Ok(views)
}

/// Scene manifest document (`scene_{index:05}.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub seed: u64,
    pub instances: Vec<SceneInstance>,
    pub views: Vec<CameraView>,
}

impl Scene {
    pub fn file_name(index: usize) -> String {
        format!("scene_{index:05}.json")
    }
}
