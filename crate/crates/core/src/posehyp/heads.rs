use rand::Rng;

use super::bins::{BinSpec, HeadConfig};
use crate::detect::FEATURE_CHANNELS;
use crate::error::{Error, Result};
use crate::geometry::Box2D;
use crate::numerics::{Dense, Layer, Param, Real, Sequential, Tensor};
use crate::scenegen::Intrinsics;

pub const ROI_SIZE: usize = 7;
pub const ROI_FEATURES: usize = FEATURE_CHANNELS * ROI_SIZE * ROI_SIZE;
pub const HIDDEN: usize = 256;

/// A `(C, 7, 7)` nearest-neighbor crop and the feature cells it read.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiPatch<T = f32> {
    pub data: Vec<T>,
    /// Flat `row * W + col` feature-map cell per sample position.
    pub cells: Vec<usize>,
}

/// Samples a 7x7 grid over `bbox` (pixels) from a `(C, H, W)` feature map of
/// the given stride; sample `i` reads the cell under `corner + (i + 0.5) / 7 * extent`.
pub fn roi_extract<T: Real>(features: &Tensor<T>, bbox: &Box2D, stride: usize) -> Result<RoiPatch<T>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("roi features (C,H,W)", &[FEATURE_CHANNELS, 0, 0], s));
    }
    if !(bbox.w >= 2.0 && bbox.h >= 2.0) || !bbox.c_x.is_finite() || !bbox.c_y.is_finite() {
        return Err(Error::Contract(format!("degenerate roi box {bbox:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let st = stride as f64;
    let pick = |origin: f64, extent: f64, i: usize, limit: usize| -> usize {
        let f = (origin + (i as f64 + 0.5) * extent / ROI_SIZE as f64) / st;
        (f.floor().max(0.0) as usize).min(limit - 1)
    };
    let mut cells = Vec::with_capacity(ROI_SIZE * ROI_SIZE);
    for i in 0..ROI_SIZE {
        let r = pick(bbox.c_y, bbox.h, i, h);
        for j in 0..ROI_SIZE {
            cells.push(r * w + pick(bbox.c_x, bbox.w, j, w));
        }
    }
    let x = features.data();
    let mut data = Vec::with_capacity(c * cells.len());
    for ch in 0..c {
        let plane = &x[ch * h * w..][..h * w];
        data.extend(cells.iter().map(|&k| plane[k]));
    }
    Ok(RoiPatch { data, cells })
}

/// Scatters a patch gradient back onto the feature-map gradient.
pub fn roi_backward<T: Real>(patch_grad: &[T], cells: &[usize], feature_grad: &mut Tensor<T>) {
    let s = feature_grad.shape();
    let plane = s[1] * s[2];
    let g = feature_grad.data_mut();
    let n = cells.len();
    for (ch, chunk) in patch_grad.chunks(n).enumerate() {
        for (&k, &v) in cells.iter().zip(chunk) {
            g[ch * plane + k] += v;
        }
    }
}

/// Box-normalized position `((x - c_x) / w, (y - c_y) / h)`.
pub fn normalize_center(center: [f64; 2], bbox: &Box2D) -> [f64; 2] {
    [(center[0] - bbox.c_x) / bbox.w, (center[1] - bbox.c_y) / bbox.h]
}

pub fn decode_center(offset: [f64; 2], bbox: &Box2D) -> [f64; 2] {
    [bbox.c_x + offset[0] * bbox.w, bbox.c_y + offset[1] * bbox.h]
}

/// Mean over the batch of the L1 distance between predicted and target
/// box-normalized centers, with its gradient.
pub fn offset_loss<T: Real>(pred: &Tensor<T>, targets: &[[f64; 2]]) -> Result<(f64, Tensor<T>)> {
    pred.expect_shape("offset prediction", &[targets.len(), 2])?;
    let n = targets.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.data().chunks(2).zip(targets) {
        for j in 0..2 {
            let r = p[j].as_f64() - t[j];
            loss += r.abs();
            grad.push(T::lit(if r == 0.0 { 0.0 } else { r.signum() / n }));
        }
    }
    Ok((loss / n, Tensor::from_vec(pred.shape(), grad)?))
}

/// Mean negative log-likelihood of the target classes under `softmax(logits)`.
pub fn classification_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape("class logits (N,K)", &[targets.len(), s.last().copied().unwrap_or(0)], s));
    }
    let k = s[1];
    let n = targets.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.data().chunks(k).zip(targets) {
        if t >= k {
            return Err(Error::Contract(format!("target class {t} out of range for {k} bins")));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[t].as_f64();
        for (j, v) in row.iter().enumerate() {
            let p = (v.as_f64() - log_z).exp();
            grad.push(T::lit((p - (j == t) as u8 as f64) / n));
        }
    }
    Ok((loss / n, Tensor::from_vec(s, grad)?))
}

/// Pinhole back-projection of the center pixel at the depth bin's center.
pub fn decode_translation(center2d: [f64; 2], depth_bin: usize, depth: &BinSpec, intr: &Intrinsics) -> nalgebra::Vector3<f64> {
    intr.back_project(center2d[0], center2d[1], depth.center(depth_bin))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Offset,
    Pitch,
    Yaw,
    Roll,
    Depth,
}

impl Head {
    pub fn name(&self) -> &'static str {
        match self {
            Head::Offset => "offset",
            Head::Pitch => "pitch",
            Head::Yaw => "yaw",
            Head::Roll => "roll",
            Head::Depth => "depth",
        }
    }
}

/// One `FC 256 -> relu -> FC out` stack per head over the flattened roi patch.
#[derive(Clone, Debug)]
pub struct PoseHeads<T = f32> {
    pub heads: Vec<(Head, Sequential<T>)>,
}

impl<T: Real> PoseHeads<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &HeadConfig, rng: &mut R) -> Self {
        let mut spec = vec![(Head::Offset, 2)];
        if let Some(p) = cfg.pitch {
            spec.push((Head::Pitch, p.count));
        }
        spec.push((Head::Yaw, cfg.yaw.count));
        if let Some(r) = cfg.roll {
            spec.push((Head::Roll, r.count));
        }
        spec.push((Head::Depth, cfg.depth.count));
        let heads = spec
            .into_iter()
            .map(|(head, out)| {
                let name = format!("posehyp.{}", head.name());
                let net = Sequential::new(vec![
                    Layer::Dense(Dense::new(&format!("{name}.fc1"), ROI_FEATURES, HIDDEN, rng)),
                    Layer::Relu,
                    Layer::Dense(Dense::new(&format!("{name}.fc2"), HIDDEN, out, rng)),
                ]);
                (head, net)
            })
            .collect();
        PoseHeads { heads }
    }

    pub fn get(&self, head: Head) -> Option<&Sequential<T>> {
        self.heads.iter().find(|(h, _)| *h == head).map(|(_, n)| n)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.heads.iter().flat_map(|(_, n)| n.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.heads.iter_mut().flat_map(|(_, n)| n.params_mut()).collect()
    }

    /// Raw outputs per head for an `(N, 1568)` patch batch.
    pub fn forward(&self, patches: &Tensor<T>) -> Result<Vec<(Head, Tensor<T>)>> {
        self.heads
            .iter()
            .map(|(h, n)| Ok((*h, n.forward(patches)?)))
            .collect()
    }

    pub fn forward_trace(&self, patches: &Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        self.heads.iter().map(|(_, n)| n.forward_trace(patches)).collect()
    }

    /// Accumulates parameter gradients and returns the summed patch gradient.
    pub fn backward(&mut self, traces: &[Vec<Tensor<T>>], upstream: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut total: Option<Tensor<T>> = None;
        for (((_, net), trace), up) in self.heads.iter_mut().zip(traces).zip(upstream) {
            let g = net.backward(trace, up)?;
            match total.as_mut() {
                Some(t) => t.axpy(T::one(), &g)?,
                None => total = Some(g),
            }
        }
        total.ok_or_else(|| Error::Contract("pose heads are empty".into()))
    }
}

/// Per-detection head outputs: box-normalized offset and class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProbs {
    pub offset: [f64; 2],
    pub pitch: Option<Vec<f64>>,
    pub yaw: Vec<f64>,
    pub roll: Option<Vec<f64>>,
    pub depth: Vec<f64>,
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(k)
        .map(|row| {
            let mut r = row.to_vec();
            crate::numerics::softmax_in_place(&mut r);
            r
        })
        .collect()
}

/// Softmax probability vectors per row of a patch batch.
pub fn class_heads_forward<T: Real>(patches: &Tensor<T>, heads: &PoseHeads<T>) -> Result<Vec<HeadProbs>> {
    let outputs = heads.forward(patches)?;
    let n = patches.shape()[0];
    let mut offset = vec![[0.0; 2]; n];
    let (mut pitch, mut yaw, mut roll, mut depth) = (None, vec![], None, vec![]);
    for (head, out) in outputs {
        let k = out.shape()[1];
        let vals: Vec<f64> = out.data().iter().map(|v| v.as_f64()).collect();
        match head {
            Head::Offset => {
                for (o, row) in offset.iter_mut().zip(vals.chunks(2)) {
                    *o = [row[0], row[1]];
                }
            }
            Head::Pitch => pitch = Some(softmax_rows(&vals, k)),
            Head::Yaw => yaw = softmax_rows(&vals, k),
            Head::Roll => roll = Some(softmax_rows(&vals, k)),
            Head::Depth => depth = softmax_rows(&vals, k),
        }
    }
    let mut pitch = pitch.map(|v| v.into_iter());
    let mut roll = roll.map(|v| v.into_iter());
    Ok(offset
        .into_iter()
        .zip(yaw)
        .zip(depth)
        .map(|((offset, yaw), depth)| HeadProbs {
            offset,
            pitch: pitch.as_mut().and_then(|it| it.next()),
            yaw,
            roll: roll.as_mut().and_then(|it| it.next()),
            depth,
        })
        .collect())
}
