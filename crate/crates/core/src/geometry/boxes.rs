use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::mesh::MeshModel;
use super::pose::Pose6D;
use crate::error::{Error, Result};

/// Image-plane box: top-left corner plus extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub c_x: f64,
    pub c_y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(c_x: f64, c_y: f64, w: f64, h: f64) -> Self {
        Box2D { c_x, c_y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Box2D::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2D::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.c_x + self.w / 2.0, self.c_y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.c_x.is_finite() && self.c_y.is_finite()
    }

    /// Intersection with `[0, width] x [0, height]`; `None` when empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<Box2D> {
        let x0 = self.c_x.max(0.0);
        let y0 = self.c_y.max(0.0);
        let x1 = (self.c_x + self.w).min(width);
        let y1 = (self.c_y + self.h).min(height);
        (x1 > x0 && y1 > y0).then(|| Box2D::from_corners(x0, y0, x1, y1))
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn box2d_iou(a: &Box2D, b: &Box2D) -> f64 {
    let iw = ((a.c_x + a.w).min(b.c_x + b.w) - a.c_x.max(b.c_x)).max(0.0);
    let ih = ((a.c_y + a.h).min(b.c_y + b.h) - a.c_y.max(b.c_y)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Axis-aligned box in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
}

/// True when the boxes share a region of positive volume.
pub fn box3d_overlaps(a: &Box3D, b: &Box3D) -> bool {
    (0..3).all(|i| (a.center[i] - b.center[i]).abs() < a.half_extents[i] + b.half_extents[i])
}

/// Axis-aligned bounds of the posed model's vertices.
pub fn model_box3d(pose: &Pose6D, model: &MeshModel) -> Result<Box3D> {
    if model.vertices.is_empty() {
        return Err(Error::Contract("model_box3d on empty mesh".into()));
    }
    let r = pose.rotation();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in &model.vertices {
        let p = r * v + pose.t;
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    Ok(Box3D {
        center: (lo + hi) / 2.0,
        half_extents: (hi - lo) / 2.0,
    })
}
