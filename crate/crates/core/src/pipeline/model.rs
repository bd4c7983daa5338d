use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::dataset::Frame;
use crate::detect::{
    assign_anchors, backbone_forward, decode_detections, detect_forward, detection_loss, normalize_depth,
    sample_anchors, AnchorGrid, AnchorLabel, Backbone, DetectHead, Detection, STRIDE,
};
use crate::error::{Error, Result};
use crate::geometry::{box2d_iou, matrix_to_euler, Box2D, MeshModel, Pose6D};
use crate::jointreg::{
    assign_labels, find_neighbors, registration_backward, registration_forward, registration_forward_trace,
    registration_loss, rescore_and_filter, LabeledHypothesis, RegistrationInput, RegistrationNet, Rescored,
};
use crate::numerics::{Adam, Checkpoint, Param, Tensor};
use crate::posehyp::{
    canonical_rotation, class_heads_forward, classification_loss, decode_center, enumerate_hypotheses,
    normalize_center, offset_loss, pose_nms, roi_backward, roi_extract, select_top, Head, HeadConfig, PoseHeads,
    PoseHypothesis, RoiPatch, ROI_FEATURES,
};
use crate::render::{DepthImage, InstanceAnnotation};
use crate::scenegen::{derive_seed, Intrinsics};

const STREAM_HEADS_INIT: u64 = u64::MAX;
const STREAM_HEADS_TRAIN: u64 = u64::MAX - 1;
const STREAM_JOINTREG_INIT: u64 = u64::MAX - 2;
const STREAM_JOINTREG_TRAIN: u64 = u64::MAX - 3;

/// Bin indices (and box-normalized center) a head should predict for one roi.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadTargets {
    pub offset: [f64; 2],
    pub pitch: Option<usize>,
    pub yaw: usize,
    pub roll: Option<usize>,
    pub depth: usize,
}

pub fn head_targets(ann: &InstanceAnnotation, roi: &Box2D, model: &MeshModel, cfg: &HeadConfig) -> Result<HeadTargets> {
    let r = canonical_rotation(model, &ann.pose.rotation(), cfg)?;
    let (pitch, yaw, roll) = matrix_to_euler(&r)?;
    Ok(HeadTargets {
        offset: normalize_center(ann.center2d, roi),
        pitch: cfg.pitch.map(|s| s.encode(pitch)),
        yaw: cfg.yaw.encode(yaw),
        roll: cfg.roll.map(|s| s.encode(roll)),
        depth: cfg.depth.encode(ann.pose.t.z),
    })
}

/// Pose implied by targets, i.e. the pose the heads would decode if every
/// prediction were exactly right.
pub fn decode_targets(t: &HeadTargets, roi: &Box2D, cfg: &HeadConfig, intr: &Intrinsics) -> Pose6D {
    let center = decode_center(t.offset, roi);
    Pose6D::new(
        cfg.pitch.zip(t.pitch).map_or(0.0, |(s, b)| s.center(b)),
        cfg.yaw.center(t.yaw),
        cfg.roll.zip(t.roll).map_or(0.0, |(s, b)| s.center(b)),
        intr.back_project(center[0], center[1], cfg.depth.center(t.depth)),
    )
}

/// Backbone, detection head and pose heads trained in the first stage.
#[derive(Clone, Debug)]
pub struct PoseNet {
    pub backbone: Backbone,
    pub detect: DetectHead,
    pub heads: PoseHeads,
    pub grid: AnchorGrid,
    pub anchors: Vec<Box2D>,
    pub head_cfg: HeadConfig,
    pub width: usize,
    pub height: usize,
}

impl PoseNet {
    pub fn new(cfg: &RunConfig, model: &MeshModel) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_HEADS_INIT));
        let (width, height) = (cfg.views.width, cfg.views.height);
        let grid = AnchorGrid::new(STRIDE, &cfg.detect.anchor_sizes, width, height)?;
        let head_cfg = cfg.head_config(model)?;
        Ok(PoseNet {
            backbone: Backbone::new(&mut rng),
            detect: DetectHead::new(cfg.detect.anchor_sizes.len(), &mut rng),
            heads: PoseHeads::new(&head_cfg, &mut rng),
            anchors: grid.anchors(),
            grid,
            head_cfg,
            width,
            height,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.net.params();
        p.extend(self.detect.net.params());
        p.extend(self.heads.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.net.params_mut();
        p.extend(self.detect.params_mut());
        p.extend(self.heads.params_mut());
        p
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params())
    }

    pub fn from_checkpoint(cfg: &RunConfig, model: &MeshModel, ck: &Checkpoint) -> Result<Self> {
        let mut net = PoseNet::new(cfg, model)?;
        ck.load_into(net.params_mut())?;
        Ok(net)
    }

    pub fn features(&self, image: &DepthImage, near: f64, far: f64) -> Result<Tensor> {
        if (image.width, image.height) != (self.width, self.height) {
            return Err(Error::shape("depth image", &[self.height, self.width], &[image.height, image.width]));
        }
        backbone_forward(&normalize_depth(image, near, far), &self.backbone, self.width, self.height)
    }
}

/// Instances the network is trained to find.
pub fn targets(frame: &Frame, min_visibility: f64) -> impl Iterator<Item = &InstanceAnnotation> {
    frame
        .annotation
        .instances
        .iter()
        .filter(move |a| a.visibility >= min_visibility && a.visible_pixels > 0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadsLoss {
    pub detection: f64,
    pub offset: f64,
    pub depth: f64,
    pub pose: f64,
    pub total: f64,
    pub rois: usize,
}

fn jitter_box<R: Rng + ?Sized>(b: &Box2D, j: f64, rng: &mut R) -> Box2D {
    let (cx, cy) = b.center();
    let mut u = || if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let (dx, dy, sw, sh) = (u() * b.w, u() * b.h, 1.0 + u(), 1.0 + u());
    Box2D::from_center(cx + dx, cy + dy, b.w * sw, b.h * sh)
}

/// Rois for head training: each target box plus jittered copies, clipped to
/// the image and capped at `max_rois`.
pub fn training_rois<R: Rng + ?Sized>(
    frame: &Frame,
    cfg: &RunConfig,
    rng: &mut R,
) -> Vec<(usize, Box2D)> {
    let (w, h) = (frame.image.width as f64, frame.image.height as f64);
    let mut rois = vec![];
    for (i, ann) in frame.annotation.instances.iter().enumerate() {
        if ann.visibility < cfg.train.min_visibility || ann.visible_pixels == 0 {
            continue;
        }
        let boxes = std::iter::once(ann.bbox)
            .chain((0..cfg.train.jitter_boxes).map(|_| jitter_box(&ann.bbox, cfg.train.jitter, rng)))
            .collect::<Vec<_>>();
        for b in boxes {
            if let Some(c) = b.clip(w, h).filter(|c| c.w >= 2.0 && c.h >= 2.0) {
                rois.push((i, c));
            }
        }
    }
    if rois.len() > cfg.train.max_rois {
        let mut keep = rand::seq::index::sample(rng, rois.len(), cfg.train.max_rois).into_vec();
        keep.sort_unstable();
        rois = keep.into_iter().map(|k| rois[k]).collect();
    }
    rois
}

/// Anchor labels with anchors near insufficiently visible instances ignored.
pub fn frame_assignments(net: &PoseNet, frame: &Frame, cfg: &RunConfig) -> (Vec<Box2D>, Vec<crate::detect::Assignment>) {
    let gts: Vec<Box2D> = targets(frame, cfg.train.min_visibility).map(|a| a.bbox).collect();
    let hidden: Vec<Box2D> = frame
        .annotation
        .instances
        .iter()
        .filter(|a| a.visibility < cfg.train.min_visibility || a.visible_pixels == 0)
        .map(|a| a.bbox)
        .collect();
    let mut assign = assign_anchors(&net.anchors, &gts, cfg.detect.positive_iou, cfg.detect.negative_iou);
    for (a, anchor) in assign.iter_mut().zip(&net.anchors) {
        if a.label == AnchorLabel::Negative && hidden.iter().any(|h| box2d_iou(anchor, h) >= cfg.detect.negative_iou) {
            a.label = AnchorLabel::Ignore;
        }
    }
    (gts, assign)
}

/// Forward and backward pass of the multi-task loss on one frame; gradients
/// are accumulated into the parameters.
pub fn heads_loss_grad<R: Rng + ?Sized>(
    net: &mut PoseNet,
    frame: &Frame,
    model: &MeshModel,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<HeadsLoss> {
    let tc = &cfg.train;
    let x = normalize_depth(&frame.image, cfg.render.near, cfg.render.far);
    let bb_trace = net.backbone.net.forward_trace(&x)?;
    let features = bb_trace.last().unwrap();

    let det_trace = net.detect.net.forward_trace(features)?;
    let (gts, assign) = frame_assignments(net, frame, cfg);
    let sampled = sample_anchors(&assign, cfg.detect.max_positives, cfg.detect.max_negatives, rng);
    let (det_loss, det_grad) = detection_loss(det_trace.last().unwrap(), &net.grid, &assign, &sampled, &gts)?;
    let det_grad = det_grad.map(|g| g * tc.weight_detection as f32);
    let mut d_features = net.detect.net.backward(&det_trace, &det_grad)?;

    let mut loss = HeadsLoss {
        detection: det_loss.total(),
        ..HeadsLoss::default()
    };
    let rois = training_rois(frame, cfg, rng);
    if !rois.is_empty() {
        let mut patches = Vec::with_capacity(rois.len() * ROI_FEATURES);
        let mut cells = Vec::with_capacity(rois.len());
        let mut tgts = Vec::with_capacity(rois.len());
        for (i, roi) in &rois {
            let p = roi_extract(features, roi, STRIDE)?;
            patches.extend_from_slice(&p.data);
            cells.push(p.cells);
            tgts.push(head_targets(&frame.annotation.instances[*i], roi, model, &net.head_cfg)?);
        }
        let patches = Tensor::from_vec(&[rois.len(), ROI_FEATURES], patches)?;
        let traces = net.heads.forward_trace(&patches)?;
        let mut upstream = Vec::with_capacity(traces.len());
        for ((head, _), trace) in net.heads.heads.iter().zip(&traces) {
            let out = trace.last().unwrap();
            let class = |f: fn(&HeadTargets) -> Option<usize>| -> Result<Vec<usize>> {
                tgts.iter()
                    .map(|t| f(t).ok_or_else(|| Error::Contract(format!("no target for head {}", head.name()))))
                    .collect()
            };
            let (g, w) = match head {
                Head::Offset => {
                    let o: Vec<[f64; 2]> = tgts.iter().map(|t| t.offset).collect();
                    let (l, g) = offset_loss(out, &o)?;
                    loss.offset += l;
                    (g, tc.weight_offset)
                }
                Head::Depth => {
                    let (l, g) = classification_loss(out, &class(|t| Some(t.depth))?)?;
                    loss.depth += l;
                    (g, tc.weight_depth)
                }
                Head::Pitch | Head::Yaw | Head::Roll => {
                    let f: fn(&HeadTargets) -> Option<usize> = match head {
                        Head::Pitch => |t| t.pitch,
                        Head::Yaw => |t| Some(t.yaw),
                        _ => |t| t.roll,
                    };
                    let (l, g) = classification_loss(out, &class(f)?)?;
                    loss.pose += l;
                    (g, tc.weight_pose)
                }
            };
            upstream.push(g.map(|v| v * w as f32));
        }
        let d_patches = net.heads.backward(&traces, &upstream)?;
        for (row, c) in d_patches.data().chunks(ROI_FEATURES).zip(&cells) {
            roi_backward(row, c, &mut d_features);
        }
        loss.rois = rois.len();
    }
    net.backbone.net.backward(&bb_trace, &d_features)?;
    loss.total = tc.weight_detection * loss.detection
        + tc.weight_offset * loss.offset
        + tc.weight_depth * loss.depth
        + tc.weight_pose * loss.pose;
    Ok(loss)
}

/// Trains the first stage for `steps` ADAM steps, one random frame per step.
/// `on_step` sees every step's loss; a non-finite loss aborts with the step index.
pub fn train_heads(
    net: &mut PoseNet,
    frames: &[Frame],
    model: &MeshModel,
    cfg: &RunConfig,
    steps: usize,
    mut on_step: impl FnMut(usize, &HeadsLoss),
) -> Result<Vec<HeadsLoss>> {
    if frames.is_empty() {
        return Err(Error::Data("no training frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_HEADS_TRAIN));
    let adam = Adam::new(cfg.train.learning_rate);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let frame = &frames[rng.random_range(0..frames.len())];
        let loss = heads_loss_grad(net, frame, model, cfg, &mut rng)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("heads loss at step {step}")));
        }
        adam.step(&mut net.params_mut())
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        on_step(step, &loss);
        trace.push(loss);
    }
    Ok(trace)
}

/// Fraction of target instances covered by a detection with IoU >= `iou`.
pub fn detection_recall(net: &PoseNet, frames: &[Frame], cfg: &RunConfig, iou: f64) -> Result<(usize, usize)> {
    let per_frame = frames
        .par_iter()
        .map(|f| -> Result<(usize, usize)> {
            let dets = detect_frame(net, &net.features(&f.image, cfg.render.near, cfg.render.far)?, cfg)?;
            let mut hit = 0;
            let mut total = 0;
            for a in targets(f, cfg.train.min_visibility) {
                total += 1;
                hit += dets.iter().any(|d| box2d_iou(&d.bbox, &a.bbox) >= iou) as usize;
            }
            Ok((hit, total))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_frame.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1)))
}

/// Top-1 bin accuracy per class head on ground-truth boxes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadAccuracy {
    pub pitch: Option<f64>,
    pub yaw: f64,
    pub roll: Option<f64>,
    pub depth: f64,
    pub samples: usize,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn head_accuracy(net: &PoseNet, frames: &[Frame], model: &MeshModel, cfg: &RunConfig) -> Result<HeadAccuracy> {
    let counts = frames
        .par_iter()
        .map(|f| -> Result<[usize; 5]> {
            let features = net.features(&f.image, cfg.render.near, cfg.render.far)?;
            let mut c = [0usize; 5];
            let mut patches = vec![];
            let mut tgts = vec![];
            for a in targets(f, cfg.train.min_visibility) {
                let Some(b) = a.bbox.clip(f.image.width as f64, f.image.height as f64).filter(|b| b.w >= 2.0 && b.h >= 2.0)
                else {
                    continue;
                };
                patches.extend(roi_extract(&features, &b, STRIDE)?.data);
                tgts.push(head_targets(a, &b, model, &net.head_cfg)?);
            }
            if tgts.is_empty() {
                return Ok(c);
            }
            let probs = class_heads_forward(&Tensor::from_vec(&[tgts.len(), ROI_FEATURES], patches)?, &net.heads)?;
            for (p, t) in probs.iter().zip(&tgts) {
                c[0] += (p.pitch.as_deref().map(argmax) == t.pitch) as usize;
                c[1] += (argmax(&p.yaw) == t.yaw) as usize;
                c[2] += (p.roll.as_deref().map(argmax) == t.roll) as usize;
                c[3] += (argmax(&p.depth) == t.depth) as usize;
                c[4] += 1;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut c = [0usize; 5];
    for f in counts {
        for (a, b) in c.iter_mut().zip(f) {
            *a += b;
        }
    }
    let n = c[4].max(1) as f64;
    Ok(HeadAccuracy {
        pitch: net.head_cfg.pitch.map(|_| c[0] as f64 / n),
        yaw: c[1] as f64 / n,
        roll: net.head_cfg.roll.map(|_| c[2] as f64 / n),
        depth: c[3] as f64 / n,
        samples: c[4],
    })
}

pub fn detect_frame(net: &PoseNet, features: &Tensor, cfg: &RunConfig) -> Result<Vec<Detection>> {
    let raw = detect_forward(features, &net.detect)?;
    decode_detections(&raw, &net.grid, &cfg.detect, net.width, net.height)
}

/// Pre-registration output of one frame.
#[derive(Clone, Debug)]
pub struct FrameInference {
    pub detections: Vec<Detection>,
    /// At most `per_detection` hypotheses per detection, grouped by detection.
    pub hypotheses: Vec<PoseHypothesis>,
    /// One roi patch row per hypothesis (its detection's patch).
    pub patches: Tensor,
}

/// Backbone, detection, per-detection heads, enumeration, pose NMS and top-n.
pub fn infer_frame(net: &PoseNet, image: &DepthImage, intr: &Intrinsics, model: &MeshModel, cfg: &RunConfig) -> Result<FrameInference> {
    let features = net.features(image, cfg.render.near, cfg.render.far)?;
    let detections: Vec<Detection> = detect_frame(net, &features, cfg)?
        .into_iter()
        .filter(|d| d.bbox.w >= 2.0 && d.bbox.h >= 2.0)
        .collect();
    let mut rows: Vec<RoiPatch> = Vec::with_capacity(detections.len());
    for d in &detections {
        rows.push(roi_extract(&features, &d.bbox, STRIDE)?);
    }
    let mut hypotheses = vec![];
    let mut patch_data = vec![];
    if !detections.is_empty() {
        let batch: Vec<f32> = rows.iter().flat_map(|r| r.data.iter().copied()).collect();
        let probs = class_heads_forward(&Tensor::from_vec(&[detections.len(), ROI_FEATURES], batch)?, &net.heads)?;
        let nms = cfg.posehyp.nms_factor * model.bsphere_diameter;
        for (i, (d, p)) in detections.iter().zip(&probs).enumerate() {
            let center = if cfg.posehyp.use_offset {
                decode_center(p.offset, &d.bbox)
            } else {
                let (cx, cy) = d.bbox.center();
                [cx, cy]
            };
            let all = enumerate_hypotheses(p, center, &net.head_cfg, cfg.posehyp.top_k, intr, i, d.bbox);
            let kept = select_top(&pose_nms(&all, model, nms)?, cfg.posehyp.per_detection);
            for h in kept {
                hypotheses.push(h);
                patch_data.extend_from_slice(&rows[i].data);
            }
        }
    }
    Ok(FrameInference {
        detections,
        patches: Tensor::from_vec(&[hypotheses.len(), ROI_FEATURES], patch_data)?,
        hypotheses,
    })
}

pub fn registration_input(inf: &FrameInference, model: &MeshModel, head_cfg: &HeadConfig) -> Result<RegistrationInput> {
    let adj = find_neighbors(&inf.hypotheses, model)?;
    RegistrationInput::build(&inf.hypotheses, inf.patches.clone(), &adj, model, head_cfg)
}

/// Joint registration of one frame's hypotheses, filtered and ranked by score.
pub fn register_frame(
    jr: &RegistrationNet,
    inf: &FrameInference,
    model: &MeshModel,
    head_cfg: &HeadConfig,
    keep_threshold: f64,
) -> Result<Vec<Rescored>> {
    if inf.hypotheses.is_empty() {
        return Ok(vec![]);
    }
    let input = registration_input(inf, model, head_cfg)?;
    let scores = registration_forward(jr, &input)?;
    rescore_and_filter(&inf.hypotheses, &scores, keep_threshold)
}

pub fn new_registration_net(cfg: &RunConfig) -> RegistrationNet {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_JOINTREG_INIT));
    RegistrationNet::new(cfg.jointreg.blocks, &mut rng)
}

pub fn registration_checkpoint(jr: &RegistrationNet) -> Checkpoint {
    Checkpoint::from_params(jr.params())
}

pub fn registration_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<RegistrationNet> {
    let mut jr = new_registration_net(cfg);
    ck.load_into(jr.params_mut())?;
    Ok(jr)
}

/// One frame's frozen-network hypotheses with their training labels. Roi
/// patches are kept once per detection; the network input is rebuilt on use.
#[derive(Clone, Debug)]
pub struct RegistrationSample {
    pub detection_patches: Tensor,
    pub labels: Vec<LabeledHypothesis>,
}

impl RegistrationSample {
    pub fn new(inf: &FrameInference, labels: Vec<LabeledHypothesis>) -> Result<Self> {
        let mut data = Vec::with_capacity(inf.detections.len() * ROI_FEATURES);
        for d in 0..inf.detections.len() {
            let row = inf.hypotheses.iter().position(|h| h.detection_index == d);
            match row {
                Some(r) => data.extend_from_slice(&inf.patches.data()[r * ROI_FEATURES..(r + 1) * ROI_FEATURES]),
                None => data.resize(data.len() + ROI_FEATURES, 0.0),
            }
        }
        Ok(RegistrationSample {
            detection_patches: Tensor::from_vec(&[inf.detections.len(), ROI_FEATURES], data)?,
            labels,
        })
    }

    pub fn input(&self, model: &MeshModel, head_cfg: &HeadConfig) -> Result<RegistrationInput> {
        let hypotheses: Vec<PoseHypothesis> = self.labels.iter().map(|l| l.hypothesis).collect();
        let src = self.detection_patches.data();
        let mut data = Vec::with_capacity(hypotheses.len() * ROI_FEATURES);
        for h in &hypotheses {
            let d = h.detection_index;
            data.extend_from_slice(&src[d * ROI_FEATURES..(d + 1) * ROI_FEATURES]);
        }
        let patches = Tensor::from_vec(&[hypotheses.len(), ROI_FEATURES], data)?;
        let adj = find_neighbors(&hypotheses, model)?;
        RegistrationInput::build(&hypotheses, patches, &adj, model, head_cfg)
    }
}

/// Runs the frozen first stage over `frames` and labels its hypotheses
/// against every annotated instance.
pub fn registration_samples(net: &PoseNet, frames: &[Frame], model: &MeshModel, cfg: &RunConfig) -> Result<Vec<RegistrationSample>> {
    let threshold = cfg.eval.threshold_factor * model.bsphere_diameter;
    let samples = frames
        .par_iter()
        .map(|f| -> Result<Option<RegistrationSample>> {
            let inf = infer_frame(net, &f.image, &f.annotation.view.intrinsics, model, cfg)?;
            if inf.hypotheses.is_empty() {
                return Ok(None);
            }
            let gt: Vec<Pose6D> = f.annotation.instances.iter().map(|a| a.pose).collect();
            let labels = assign_labels(&inf.hypotheses, &gt, model, threshold, &cfg.jointreg)?;
            RegistrationSample::new(&inf, labels).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(samples.into_iter().flatten().collect())
}

/// Trains the registration network, one random frame per step; the loss is
/// averaged over the frame's hypotheses.
pub fn train_registration(
    jr: &mut RegistrationNet,
    samples: &[RegistrationSample],
    model: &MeshModel,
    head_cfg: &HeadConfig,
    cfg: &RunConfig,
    steps: usize,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Data("the heads produced no hypotheses on the training frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_JOINTREG_TRAIN));
    let adam = Adam::new(cfg.train.learning_rate);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let s = &samples[rng.random_range(0..samples.len())];
        let input = s.input(model, head_cfg)?;
        let t = registration_forward_trace(jr, &input)?;
        let (loss, grad) = registration_loss(&t.scores(), &s.labels)?;
        let n = s.labels.len() as f64;
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("jointreg loss at step {step}")));
        }
        let grad: Vec<f64> = grad.iter().map(|g| g / n).collect();
        registration_backward(jr, &input, &t, &grad)?;
        adam.step(&mut jr.params_mut())
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        on_step(step, loss);
        trace.push(loss);
    }
    Ok(trace)
}
