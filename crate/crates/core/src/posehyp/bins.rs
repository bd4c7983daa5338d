use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, matrix_to_euler, MeshModel};

/// Uniform partition of `[lo, hi)` into `count` classes represented by their centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
    /// Values wrap around the range instead of clamping.
    pub periodic: bool,
}

impl BinSpec {
    pub fn new(count: usize, lo: f64, hi: f64, periodic: bool) -> Result<Self> {
        if count == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid bin spec: {count} bins over [{lo}, {hi})")));
        }
        Ok(BinSpec { count, lo, hi, periodic })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.count as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }

    pub fn contains(&self, value: f64) -> bool {
        self.periodic || (self.lo..=self.hi).contains(&value)
    }

    /// Bin index; out-of-range values wrap (periodic) or clamp.
    pub fn encode(&self, value: f64) -> usize {
        let span = self.hi - self.lo;
        let v = if self.periodic {
            (value - self.lo).rem_euclid(span)
        } else {
            (value - self.lo).clamp(0.0, span)
        };
        ((v / span * self.count as f64).floor() as usize).min(self.count - 1)
    }

    /// `(value - lo) / (hi - lo)`, clamped to `[0, 1]`.
    pub fn normalize(&self, value: f64) -> f64 {
        ((value - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Bin layout of the rotation and depth heads. An absent angle head is
/// unobservable for the model and decodes to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub pitch: Option<BinSpec>,
    pub yaw: BinSpec,
    pub roll: Option<BinSpec>,
    pub depth: BinSpec,
}

impl HeadConfig {
    /// 30 / 13 / 30 angle classes and 140 depth classes over `[d_lo, d_hi)`.
    pub fn new(depth_lo: f64, depth_hi: f64) -> Result<Self> {
        Ok(HeadConfig {
            pitch: Some(BinSpec::new(30, 0.0, TAU, true)?),
            yaw: BinSpec::new(13, -FRAC_PI_2, FRAC_PI_2, false)?,
            roll: Some(BinSpec::new(30, 0.0, TAU, true)?),
            depth: BinSpec::new(140, depth_lo, depth_hi, false)?,
        })
    }

    /// Drops the angle head made unobservable by the model's axial symmetry.
    /// Pitch is the first rotation applied (about model y), so a model
    /// spinning freely about y has no defined pitch.
    pub fn for_model(model: &MeshModel, depth_lo: f64, depth_hi: f64) -> Result<Self> {
        let mut cfg = Self::new(depth_lo, depth_hi)?;
        if let Some(axis) = model.symmetry.axial {
            if (axis.dot(&Vector3::y()).abs() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "axial symmetry of `{}` must be about the model y axis",
                    model.name
                )));
            }
            cfg.pitch = None;
        }
        Ok(cfg)
    }

    /// Size of the full discrete pose space (angles times depth).
    pub fn cardinality(&self) -> u64 {
        [self.pitch, Some(self.yaw), self.roll, Some(self.depth)]
            .iter()
            .flatten()
            .map(|b| b.count as u64)
            .product()
    }
}

/// Representative of the rotation's symmetry class: the finite group element
/// bringing it closest to the identity, with an unobservable pitch zeroed.
pub fn canonical_rotation(model: &MeshModel, r: &Matrix3<f64>, cfg: &HeadConfig) -> Result<Matrix3<f64>> {
    let mut best: Option<(f64, Matrix3<f64>)> = None;
    for g in &model.symmetry.finite_rotations {
        let mut c = r * g;
        if cfg.pitch.is_none() {
            let (_, yaw, roll) = matrix_to_euler(&c)?;
            c = euler_to_matrix(0.0, yaw, roll);
        }
        let score = c.trace();
        if best.is_none_or(|(s, _)| score > s + 1e-12) {
            best = Some((score, c));
        }
    }
    Ok(best.expect("symmetry group contains the identity").1)
}
