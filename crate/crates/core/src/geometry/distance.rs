use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use super::mesh::MeshModel;
use super::pose::Pose6D;
use crate::error::{Error, Result};

const AXIAL_GRID_STEPS: usize = 72;
const AXIAL_TOLERANCE: f64 = 1e-4;

fn mean_displacement(model: &MeshModel, rp: &Matrix3<f64>, tp: &Vector3<f64>, rq: &Matrix3<f64>, tq: &Vector3<f64>) -> f64 {
    let sum: f64 = model
        .vertices
        .iter()
        .map(|v| ((rp * v + tp) - (rq * v + tq)).norm())
        .sum();
    sum / model.vertices.len() as f64
}

fn check_mesh(model: &MeshModel) -> Result<()> {
    if model.vertices.is_empty() {
        return Err(Error::Contract("distance on empty mesh".into()));
    }
    Ok(())
}

/// Average distance between corresponding model points (no symmetry).
pub fn add_distance(p: &Pose6D, q: &Pose6D, model: &MeshModel) -> Result<f64> {
    check_mesh(model)?;
    Ok(mean_displacement(model, &p.rotation(), &p.t, &q.rotation(), &q.t))
}

/// Symmetry-minimized mean vertex displacement.
///
/// Minimizes over every finite symmetry element and, for axial symmetry,
/// over the continuous angle about the axis: a 72-step grid followed by
/// golden-section refinement of the best cell to 1e-4 rad.
pub fn sym_distance(p: &Pose6D, q: &Pose6D, model: &MeshModel) -> Result<f64> {
    check_mesh(model)?;
    let (rp, rq) = (p.rotation(), q.rotation());
    let mut best = f64::INFINITY;
    for g in &model.symmetry.finite_rotations {
        let base = rp * g;
        let d = match model.symmetry.axial {
            None => mean_displacement(model, &base, &p.t, &rq, &q.t),
            Some(axis) => {
                let axis = Unit::new_normalize(axis);
                let f = |theta: f64| {
                    let spin = Rotation3::from_axis_angle(&axis, theta).into_inner();
                    mean_displacement(model, &(rp * spin * g), &p.t, &rq, &q.t)
                };
                minimize_periodic(f)
            }
        };
        best = best.min(d);
    }
    Ok(best)
}

fn minimize_periodic(f: impl Fn(f64) -> f64) -> f64 {
    let step = std::f64::consts::TAU / AXIAL_GRID_STEPS as f64;
    let (mut best_k, mut best_v) = (0, f64::INFINITY);
    for k in 0..AXIAL_GRID_STEPS {
        let v = f(k as f64 * step);
        if v < best_v {
            best_k = k;
            best_v = v;
        }
    }
    let center = best_k as f64 * step;
    let (mut a, mut b) = (center - step, center + step);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > AXIAL_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    best_v.min(fc).min(fd).min(f((a + b) / 2.0))
}
