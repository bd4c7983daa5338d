use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

use super::proxy::CollisionProxy;
use crate::geometry::Pose6D;

/// World-frame sphere.
#[derive(Clone, Copy, Debug)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Interior of the bin: `|x| <= hx`, `|y| <= hy`, `0 <= z <= 2 hz`.
#[derive(Clone, Copy, Debug)]
pub struct BinBounds {
    pub half_extents: Vector3<f64>,
}

pub fn posed_spheres(proxy: &CollisionProxy, pose: &Pose6D) -> Vec<Sphere> {
    let r = pose.rotation();
    proxy
        .centers
        .iter()
        .zip(&proxy.radii)
        .map(|(c, rad)| Sphere {
            center: r * c + pose.t,
            radius: *rad,
        })
        .collect()
}

/// Deepest penetration of `spheres` into the floor, the walls or `others`.
pub fn max_penetration(spheres: &[Sphere], others: &[Sphere], bin: &BinBounds) -> f64 {
    let h = bin.half_extents;
    let mut worst = 0.0f64;
    for s in spheres {
        worst = worst.max(s.radius - s.center.z);
        worst = worst.max(s.center.x + s.radius - h.x);
        worst = worst.max(-h.x - (s.center.x - s.radius));
        worst = worst.max(s.center.y + s.radius - h.y);
        worst = worst.max(-h.y - (s.center.y - s.radius));
        for o in others {
            worst = worst.max(s.radius + o.radius - (s.center - o.center).norm());
        }
    }
    worst
}

/// Translation that removes the contacts of one sphere, applied greedily.
fn correction(s: &Sphere, others: &[Sphere], bin: &BinBounds) -> Vector3<f64> {
    let h = bin.half_extents;
    let mut c = s.center;
    let mut push = Vector3::zeros();
    let mut apply = |d: Vector3<f64>, c: &mut Vector3<f64>| {
        *c += d;
        push += d;
    };
    if c.z - s.radius < 0.0 {
        apply(Vector3::new(0.0, 0.0, s.radius - c.z), &mut c);
    }
    if c.x + s.radius > h.x {
        apply(Vector3::new(h.x - s.radius - c.x, 0.0, 0.0), &mut c);
    }
    if c.x - s.radius < -h.x {
        apply(Vector3::new(-h.x + s.radius - c.x, 0.0, 0.0), &mut c);
    }
    if c.y + s.radius > h.y {
        apply(Vector3::new(0.0, h.y - s.radius - c.y, 0.0), &mut c);
    }
    if c.y - s.radius < -h.y {
        apply(Vector3::new(0.0, -h.y + s.radius - c.y, 0.0), &mut c);
    }
    for o in others {
        let d = c - o.center;
        let dist = d.norm();
        let pen = s.radius + o.radius - dist;
        if pen > 0.0 {
            let n = if dist > 1e-12 { d / dist } else { Vector3::z() };
            apply(n * pen, &mut c);
        }
    }
    push
}

pub struct SettleParams {
    pub iterations: usize,
    pub tolerance: f64,
    pub gravity_step: f64,
}

/// Drops one instance onto the settled pile.
///
/// Each iteration descends by one gravity step and then projects the body
/// (translation only) out of the floor, walls and settled spheres. Stops
/// once the body has stopped moving; `None` when the final penetration
/// still exceeds the tolerance.
pub fn drop_instance(
    proxy: &CollisionProxy,
    mut pose: Pose6D,
    settled: &[Sphere],
    bin: &BinBounds,
    params: &SettleParams,
) -> Option<Pose6D> {
    const PROJECTION_PASSES: usize = 50;
    const REST_ITERS: usize = 25;
    let rot = pose.rotation();
    let offsets: Vec<(Vector3<f64>, f64)> = proxy
        .centers
        .iter()
        .zip(&proxy.radii)
        .map(|(c, r)| (rot * c, *r))
        .collect();
    let spheres_at = |t: &Vector3<f64>| -> Vec<Sphere> {
        offsets
            .iter()
            .map(|(o, r)| Sphere {
                center: o + t,
                radius: *r,
            })
            .collect()
    };
    let mut still = 0;
    for _ in 0..params.iterations {
        let before = pose.t;
        pose.t.z -= params.gravity_step;
        for _ in 0..PROJECTION_PASSES {
            let mut moved = false;
            for (o, r) in &offsets {
                let cur = Sphere {
                    center: o + pose.t,
                    radius: *r,
                };
                let d = correction(&cur, settled, bin);
                if d.norm() > 0.0 {
                    pose.t += d;
                    moved = true;
                }
            }
            if !moved || max_penetration(&spheres_at(&pose.t), settled, bin) <= 1e-7 {
                break;
            }
        }
        if (pose.t - before).norm() < 1e-5 {
            still += 1;
            if still >= REST_ITERS {
                break;
            }
        } else {
            still = 0;
        }
    }
    let pen = max_penetration(&spheres_at(&pose.t), settled, bin);
    (pen <= params.tolerance).then_some(pose)
}

/// Uniformly distributed rotation (Shoemake's method).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> nalgebra::Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let q = Quaternion::new(
        u1.sqrt() * (tau * u3).cos(),
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}
