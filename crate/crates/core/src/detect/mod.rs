//! Single-class anchor detector over the shared depth feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box2d_iou, Box2D};
use crate::numerics::{Conv3x3, Layer, Param, Real, Sequential, Tensor};
use crate::render::DepthImage;

pub const FEATURE_CHANNELS: usize = 32;
pub const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Square anchor side lengths in pixels.
    pub anchor_sizes: Vec<f64>,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub max_positives: usize,
    pub max_negatives: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            anchor_sizes: vec![16.0, 24.0, 32.0],
            positive_iou: 0.5,
            negative_iou: 0.2,
            max_positives: 64,
            max_negatives: 64,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 40,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("anchor sizes must be positive and non-empty".into()));
        }
        if !(self.negative_iou <= self.positive_iou) {
            return Err(Error::Config("negative IoU band must lie below the positive one".into()));
        }
        Ok(())
    }
}

/// Anchors centered on every feature cell; index `(row * cols + col) * A + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub stride: usize,
    pub sizes: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl AnchorGrid {
    pub fn new(stride: usize, sizes: &[f64], width: usize, height: usize) -> Result<Self> {
        if stride == 0 || !width.is_multiple_of(stride) || !height.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "image {width}x{height} is not divisible by stride {stride}"
            )));
        }
        Ok(AnchorGrid {
            stride,
            sizes: sizes.to_vec(),
            rows: height / stride,
            cols: width / stride,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchor(&self, k: usize) -> Box2D {
        let a = k % self.sizes.len();
        let cell = k / self.sizes.len();
        let (r, c) = (cell / self.cols, cell % self.cols);
        let s = self.stride as f64;
        Box2D::from_center((c as f64 + 0.5) * s, (r as f64 + 0.5) * s, self.sizes[a], self.sizes[a])
    }

    pub fn anchors(&self) -> Vec<Box2D> {
        (0..self.len()).map(|k| self.anchor(k)).collect()
    }

    /// Flat offset of value `j` (0 = logit, 1..=4 = deltas) of anchor `k`
    /// in a `(5A, rows, cols)` head output.
    pub fn raw_index(&self, k: usize, j: usize) -> usize {
        let a = k % self.sizes.len();
        let cell = k / self.sizes.len();
        (a * 5 + j) * self.rows * self.cols + cell
    }

    pub fn raw_shape(&self) -> [usize; 3] {
        [self.sizes.len() * 5, self.rows, self.cols]
    }
}

/// `(dx / w_a, dy / h_a, ln(w / w_a), ln(h / h_a))` of box centers.
pub fn encode_box(b: &Box2D, anchor: &Box2D) -> [f64; 4] {
    let (bx, by) = b.center();
    let (ax, ay) = anchor.center();
    [
        (bx - ax) / anchor.w,
        (by - ay) / anchor.h,
        (b.w / anchor.w).ln(),
        (b.h / anchor.h).ln(),
    ]
}

pub fn decode_box(d: &[f64; 4], anchor: &Box2D) -> Box2D {
    let (ax, ay) = anchor.center();
    Box2D::from_center(
        ax + d[0] * anchor.w,
        ay + d[1] * anchor.h,
        anchor.w * d[2].exp(),
        anchor.h * d[3].exp(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub label: AnchorLabel,
    /// Matched ground-truth index for positives.
    pub gt: Option<usize>,
}

pub fn assign_anchors(anchors: &[Box2D], gt_boxes: &[Box2D], positive_iou: f64, negative_iou: f64) -> Vec<Assignment> {
    let mut best = vec![(0.0f64, None::<usize>); anchors.len()];
    let mut forced: Vec<Option<usize>> = vec![None; anchors.len()];
    for (g, gt) in gt_boxes.iter().enumerate() {
        let mut arg = None;
        let mut arg_iou = 0.0;
        for (k, a) in anchors.iter().enumerate() {
            let iou = box2d_iou(a, gt);
            if iou > best[k].0 {
                best[k] = (iou, Some(g));
            }
            if iou > arg_iou {
                arg_iou = iou;
                arg = Some(k);
            }
        }
        if let Some(k) = arg {
            forced[k].get_or_insert(g);
        }
    }
    best.iter()
        .zip(&forced)
        .map(|(&(iou, g), f)| {
            if iou >= positive_iou {
                Assignment { label: AnchorLabel::Positive, gt: g }
            } else if f.is_some() {
                Assignment { label: AnchorLabel::Positive, gt: *f }
            } else if iou < negative_iou {
                Assignment { label: AnchorLabel::Negative, gt: None }
            } else {
                Assignment { label: AnchorLabel::Ignore, gt: None }
            }
        })
        .collect()
}

/// Random subset of at most `max_pos` positives and `max_neg` negatives, sorted.
pub fn sample_anchors<R: Rng + ?Sized>(
    assignments: &[Assignment],
    max_pos: usize,
    max_neg: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pick = |label: AnchorLabel, cap: usize| -> Vec<usize> {
        let pool: Vec<usize> = (0..assignments.len())
            .filter(|&k| assignments[k].label == label)
            .collect();
        if pool.len() <= cap {
            return pool;
        }
        rand::seq::index::sample(rng, pool.len(), cap)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let mut out = pick(AnchorLabel::Positive, max_pos);
    out.extend(pick(AnchorLabel::Negative, max_neg));
    out.sort_unstable();
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln s(x) + (1 - y) ln(1 - s(x))]` in overflow-free form.
pub(crate) fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionLoss {
    pub objectness: f64,
    pub box_l1: f64,
}

impl DetectionLoss {
    pub fn total(&self) -> f64 {
        self.objectness + self.box_l1
    }
}

/// Mean BCE over the sampled anchors plus mean L1 norm of delta errors over
/// the sampled positives. Returns the gradient with respect to `raw`.
pub fn detection_loss<T: Real>(
    raw: &Tensor<T>,
    grid: &AnchorGrid,
    assignments: &[Assignment],
    sampled: &[usize],
    gt_boxes: &[Box2D],
) -> Result<(DetectionLoss, Tensor<T>)> {
    raw.expect_shape("detection head output", &grid.raw_shape())?;
    if assignments.len() != grid.len() {
        return Err(Error::Contract(format!(
            "{} assignments for {} anchors",
            assignments.len(),
            grid.len()
        )));
    }
    let x = raw.data();
    let mut grad = vec![0.0f64; x.len()];
    let n = sampled.len().max(1) as f64;
    let positives: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&k| assignments[k].label == AnchorLabel::Positive)
        .collect();
    let n_pos = positives.len().max(1) as f64;
    let mut obj = 0.0;
    for &k in sampled {
        let y = match assignments[k].label {
            AnchorLabel::Positive => 1.0,
            AnchorLabel::Negative => 0.0,
            AnchorLabel::Ignore => {
                return Err(Error::Contract(format!("anchor {k} is ignored but was sampled")));
            }
        };
        let i = grid.raw_index(k, 0);
        let logit = x[i].as_f64();
        obj += bce_with_logit(logit, y);
        grad[i] += (sigmoid(logit) - y) / n;
    }
    let mut l1 = 0.0;
    for &k in &positives {
        let g = assignments[k]
            .gt
            .ok_or_else(|| Error::Contract(format!("positive anchor {k} has no match")))?;
        let target = encode_box(&gt_boxes[g], &grid.anchor(k));
        for (j, t) in target.iter().enumerate() {
            let i = grid.raw_index(k, j + 1);
            let r = x[i].as_f64() - t;
            l1 += r.abs();
            grad[i] += r.signum() * (r != 0.0) as u8 as f64 / n_pos;
        }
    }
    let loss = DetectionLoss {
        objectness: obj / n,
        box_l1: l1 / n_pos,
    };
    let grad = Tensor::from_vec(raw.shape(), grad.into_iter().map(T::lit).collect())?;
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box2D,
    pub score: f64,
}

/// Greedy descending-score suppression of boxes overlapping a kept one by
/// more than `iou_threshold`; equal scores keep the earlier index first.
pub fn box_nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut kept: Vec<Detection> = vec![];
    for i in order {
        let d = detections[i];
        if kept.iter().all(|k| box2d_iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Scored, clipped, NMS-filtered detections from a head output.
pub fn decode_detections<T: Real>(
    raw: &Tensor<T>,
    grid: &AnchorGrid,
    cfg: &DetectConfig,
    width: usize,
    height: usize,
) -> Result<Vec<Detection>> {
    raw.expect_shape("detection head output", &grid.raw_shape())?;
    let x = raw.data();
    let mut candidates = vec![];
    for k in 0..grid.len() {
        let score = sigmoid(x[grid.raw_index(k, 0)].as_f64());
        if score < cfg.score_threshold {
            continue;
        }
        let d = [1, 2, 3, 4].map(|j| x[grid.raw_index(k, j)].as_f64().clamp(-4.0, 4.0));
        if let Some(bbox) = decode_box(&d, &grid.anchor(k)).clip(width as f64, height as f64) {
            candidates.push(Detection { bbox, score });
        }
    }
    let mut kept = box_nms(&candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}

/// Affine map of depth from `[near, far]` to `[0, 1]`; background maps to 1.
pub fn normalize_depth(image: &DepthImage, near: f64, far: f64) -> Tensor<f32> {
    let scale = 1.0 / (far - near);
    let data = image
        .depth
        .iter()
        .map(|&d| (((d as f64 - near) * scale).clamp(0.0, 1.0)) as f32)
        .collect();
    Tensor::from_vec(&[1, image.height, image.width], data).expect("image buffer matches its size")
}

/// Conv-relu stack `1 -> 8 -> 16 -> pool -> 32 -> 32 -> pool`, stride 4.
#[derive(Clone, Debug)]
pub struct Backbone<T = f32> {
    pub net: Sequential<T>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let conv = |name: &str, i, o, rng: &mut R| Layer::Conv3x3(Conv3x3::new(name, i, o, 1, rng));
        Backbone {
            net: Sequential::new(vec![
                conv("detect.backbone.conv1", 1, 8, rng),
                Layer::Relu,
                conv("detect.backbone.conv2", 8, 16, rng),
                Layer::Relu,
                Layer::MaxPool2x2,
                conv("detect.backbone.conv3", 16, 32, rng),
                Layer::Relu,
                conv("detect.backbone.conv4", 32, FEATURE_CHANNELS, rng),
                Layer::Relu,
                Layer::MaxPool2x2,
            ]),
        }
    }
}

/// Shared feature map `(32, H/4, W/4)` of a normalized `(1, H, W)` image.
pub fn backbone_forward<T: Real>(image: &Tensor<T>, backbone: &Backbone<T>, width: usize, height: usize) -> Result<Tensor<T>> {
    image.expect_shape("normalized depth image", &[1, height, width])?;
    backbone.net.forward(image)
}

/// `conv3x3 32 -> 32, relu, conv3x3 32 -> 5A`.
#[derive(Clone, Debug)]
pub struct DetectHead<T = f32> {
    pub net: Sequential<T>,
}

impl<T: Real> DetectHead<T> {
    pub fn new<R: Rng + ?Sized>(anchors_per_cell: usize, rng: &mut R) -> Self {
        let mut out = Conv3x3::new("detect.head.conv2", FEATURE_CHANNELS, anchors_per_cell * 5, 1, rng);
        // start with low objectness so early training is not swamped by negatives
        let b = out.bias.value.data_mut();
        for a in 0..anchors_per_cell {
            b[a * 5] = T::lit(-2.0);
        }
        DetectHead {
            net: Sequential::new(vec![
                Layer::Conv3x3(Conv3x3::new("detect.head.conv1", FEATURE_CHANNELS, FEATURE_CHANNELS, 1, rng)),
                Layer::Relu,
                Layer::Conv3x3(out),
            ]),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

pub fn detect_forward<T: Real>(features: &Tensor<T>, head: &DetectHead<T>) -> Result<Tensor<T>> {
    head.net.forward(features)
}
