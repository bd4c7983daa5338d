use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid pose as Euler angles plus translation (meters).
///
/// Rotation convention, used everywhere in the crate:
/// `R = Rz(roll) * Rx(yaw) * Ry(pitch)`, applied to model-frame points as
/// `R * v + t`. Canonical ranges are pitch, roll in `[0, 2pi)` and yaw in
/// `[-pi/2, pi/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub t: Vector3<f64>,
}

impl Pose6D {
    pub fn new(pitch: f64, yaw: f64, roll: f64, t: Vector3<f64>) -> Self {
        Pose6D { pitch, yaw, roll, t }
    }

    pub fn identity() -> Self {
        Pose6D::new(0.0, 0.0, 0.0, Vector3::zeros())
    }

    pub fn from_rotation(r: &Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let (pitch, yaw, roll) = matrix_to_euler(r)?;
        Ok(Pose6D { pitch, yaw, roll, t })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_matrix(self.pitch, self.yaw, self.roll)
    }

    pub fn transform(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v + self.t
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Rz(roll) * Rx(yaw) * Ry(pitch)`
pub fn euler_to_matrix(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    rot_z(roll) * rot_x(yaw) * rot_y(pitch)
}

/// Maps an angle into `[0, 2pi)`.
pub fn wrap_tau(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Inverse of [`euler_to_matrix`] into canonical ranges.
///
/// At gimbal lock (`|yaw| = pi/2`) roll is fixed to 0 and pitch absorbs the
/// free angle.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> Result<(f64, f64, f64)> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !ortho.is_finite() || ortho > 1e-4 || (det - 1.0).abs() > 1e-4 {
        return Err(Error::Contract(format!(
            "matrix_to_euler needs a rotation (orthogonality error {ortho:e}, det {det})"
        )));
    }
    // Row 2 of R is [-cos(yaw) sin(pitch), sin(yaw), cos(yaw) cos(pitch)].
    let cy = r[(2, 0)].hypot(r[(2, 2)]);
    if cy < 1e-9 {
        let yaw = if r[(2, 1)] > 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 };
        let pitch = wrap_tau(r[(0, 2)].atan2(r[(0, 0)]));
        return Ok((pitch, yaw, 0.0));
    }
    let yaw = r[(2, 1)].atan2(cy);
    let pitch = wrap_tau((-r[(2, 0)]).atan2(r[(2, 2)]));
    // Column 1 of R is [-sin(roll) cos(yaw), cos(roll) cos(yaw), sin(yaw)].
    let roll = wrap_tau((-r[(0, 1)]).atan2(r[(1, 1)]));
    Ok((pitch, yaw, roll))
}
