//! Relational rescoring of pooled pose hypotheses.
//!
//! Each hypothesis of interest (HOI) is paired with its neighbors (NH),
//! every pair goes through a shared block, block outputs are max-pooled over
//! the neighbors, and a small classifier turns the pooled vector into a logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detect::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::{box2d_iou, box3d_overlaps, model_box3d, sym_distance, MeshModel};
use crate::numerics::{Dense, Layer, Param, Real, Sequential, Tensor};
use crate::posehyp::{HeadConfig, PoseHypothesis, ROI_FEATURES};

pub const RELATION_DIM: usize = 13;
pub const APPEARANCE_DIM: usize = 64;
pub const BLOCK_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointRegConfig {
    pub blocks: usize,
    pub positive_weight: f64,
    pub negative_weight: f64,
    pub keep_threshold: f64,
}

impl Default for JointRegConfig {
    fn default() -> Self {
        JointRegConfig {
            blocks: 1,
            positive_weight: 1.0,
            negative_weight: 16.0,
            keep_threshold: 0.0,
        }
    }
}

impl JointRegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.blocks) {
            return Err(Error::Config(format!("jointreg blocks must be 1 to 3, got {}", self.blocks)));
        }
        if !(self.positive_weight > 0.0 && self.negative_weight > 0.0) {
            return Err(Error::Config("jointreg class weights must be positive".into()));
        }
        Ok(())
    }
}

/// Per-HOI neighbor lists: every other hypothesis whose posed-model 3D box
/// overlaps the HOI's; an isolated hypothesis is its own sole neighbor.
pub fn find_neighbors(hypotheses: &[PoseHypothesis], model: &MeshModel) -> Result<Vec<Vec<usize>>> {
    let boxes = hypotheses
        .iter()
        .map(|h| model_box3d(&h.pose, model))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..boxes.len())
        .map(|i| {
            let n: Vec<usize> = (0..boxes.len())
                .filter(|&j| j != i && box3d_overlaps(&boxes[i], &boxes[j]))
                .collect();
            if n.is_empty() {
                vec![i]
            } else {
                n
            }
        })
        .collect())
}

/// The 13 pair features: both confidences, 2D box IoU, both sets of Euler
/// angles normalized over their bin ranges, the center displacement
/// `nh - hoi` over the model diameter, and its norm.
pub fn relation_feature(hoi: &PoseHypothesis, nh: &PoseHypothesis, model: &MeshModel, cfg: &HeadConfig) -> [f64; RELATION_DIM] {
    let angles = |h: &PoseHypothesis| {
        [
            cfg.pitch.map_or(0.0, |b| b.normalize(h.pose.pitch)),
            cfg.yaw.normalize(h.pose.yaw),
            cfg.roll.map_or(0.0, |b| b.normalize(h.pose.roll)),
        ]
    };
    let d = (nh.pose.t - hoi.pose.t) / model.diameter;
    let (a, b) = (angles(hoi), angles(nh));
    [
        hoi.confidence,
        nh.confidence,
        box2d_iou(&hoi.bbox, &nh.bbox),
        a[0],
        a[1],
        a[2],
        b[0],
        b[1],
        b[2],
        d.x,
        d.y,
        d.z,
        d.norm(),
    ]
}

/// Appearance projector, stacked pair blocks and pooled classifier.
#[derive(Clone, Debug)]
pub struct RegistrationNet<T = f32> {
    pub projector: Sequential<T>,
    pub blocks: Vec<Sequential<T>>,
    pub classifier: Sequential<T>,
}

impl<T: Real> RegistrationNet<T> {
    pub fn new<R: Rng + ?Sized>(blocks: usize, rng: &mut R) -> Self {
        let dense = |name: &str, i, o, rng: &mut R| Layer::Dense(Dense::new(name, i, o, rng));
        let projector = Sequential::new(vec![
            dense("jointreg.projector", ROI_FEATURES, APPEARANCE_DIM, rng),
            Layer::Relu,
        ]);
        let blocks = (0..blocks)
            .map(|b| {
                let width = if b == 0 { APPEARANCE_DIM } else { BLOCK_DIM };
                Sequential::new(vec![
                    dense(&format!("jointreg.block{b}.fc1"), 2 * width + RELATION_DIM, BLOCK_DIM, rng),
                    Layer::Relu,
                    dense(&format!("jointreg.block{b}.fc2"), BLOCK_DIM, BLOCK_DIM, rng),
                ])
            })
            .collect();
        let classifier = Sequential::new(vec![
            dense("jointreg.classifier.fc1", BLOCK_DIM, 64, rng),
            Layer::Relu,
            dense("jointreg.classifier.fc2", 64, 1, rng),
        ]);
        RegistrationNet { projector, blocks, classifier }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.projector.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.projector.params_mut();
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn cast<U: Real>(&self) -> RegistrationNet<U> {
        RegistrationNet {
            projector: self.projector.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            classifier: self.classifier.cast(),
        }
    }
}

/// Inputs of one frame: `(N, 1568)` patches, ordered pair list with one
/// relation vector per pair, and per-HOI pair ranges.
#[derive(Clone, Debug)]
pub struct RegistrationInput<T = f32> {
    pub patches: Tensor<T>,
    pub pairs: Vec<(usize, usize)>,
    pub relations: Vec<[f64; RELATION_DIM]>,
}

impl<T: Real> RegistrationInput<T> {
    pub fn build(
        hypotheses: &[PoseHypothesis],
        patches: Tensor<T>,
        adjacency: &[Vec<usize>],
        model: &MeshModel,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        if patches.shape() != [hypotheses.len(), ROI_FEATURES] || adjacency.len() != hypotheses.len() {
            return Err(Error::shape(
                "registration patches",
                &[hypotheses.len(), ROI_FEATURES],
                patches.shape(),
            ));
        }
        let mut pairs = vec![];
        let mut relations = vec![];
        for (i, nbrs) in adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                return Err(Error::Contract(format!("hypothesis {i} has no neighbors")));
            }
            for &j in nbrs {
                pairs.push((i, j));
                relations.push(relation_feature(&hypotheses[i], &hypotheses[j], model, cfg));
            }
        }
        Ok(RegistrationInput { patches, pairs, relations })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct BlockTrace<T> {
    acts: Vec<Tensor<T>>,
    /// Winning pair row per `(hoi, channel)`.
    argmax: Vec<usize>,
}

/// Activations kept for backpropagation.
pub struct RegistrationTrace<T> {
    projector: Vec<Tensor<T>>,
    blocks: Vec<BlockTrace<T>>,
    classifier: Vec<Tensor<T>>,
}

impl<T: Real> RegistrationTrace<T> {
    pub fn scores(&self) -> Vec<f64> {
        self.classifier.last().unwrap().data().iter().map(|v| v.as_f64()).collect()
    }

    /// Sign of every activation and the max-pool winners. The scores are
    /// smooth in the parameters over any region where this stays fixed.
    pub fn switches(&self) -> (Vec<bool>, Vec<usize>) {
        let stages = [&self.projector, &self.classifier]
            .into_iter()
            .chain(self.blocks.iter().map(|b| &b.acts));
        let signs = stages
            .flat_map(|acts| acts.iter())
            .flat_map(|t| t.data().iter().map(|v| *v > T::zero()))
            .collect();
        let winners = self.blocks.iter().flat_map(|b| b.argmax.iter().copied()).collect();
        (signs, winners)
    }
}

fn pair_matrix<T: Real>(h: &Tensor<T>, input: &RegistrationInput<T>) -> Result<Tensor<T>> {
    let d = h.shape()[1];
    let width = 2 * d + RELATION_DIM;
    let mut data = Vec::with_capacity(input.pairs.len() * width);
    let x = h.data();
    for ((i, j), rel) in input.pairs.iter().zip(&input.relations) {
        data.extend_from_slice(&x[i * d..][..d]);
        data.extend_from_slice(&x[j * d..][..d]);
        data.extend(rel.iter().map(|v| T::lit(*v)));
    }
    Tensor::from_vec(&[input.pairs.len(), width], data)
}

fn max_pool<T: Real>(pair_out: &Tensor<T>, input: &RegistrationInput<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let n = input.len();
    let mut pooled = vec![T::neg_infinity(); n * BLOCK_DIM];
    let mut argmax = vec![usize::MAX; n * BLOCK_DIM];
    let y = pair_out.data();
    for (row, (i, _)) in input.pairs.iter().enumerate() {
        for c in 0..BLOCK_DIM {
            let v = y[row * BLOCK_DIM + c];
            let k = i * BLOCK_DIM + c;
            if argmax[k] == usize::MAX || v > pooled[k] {
                pooled[k] = v;
                argmax[k] = row;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, BLOCK_DIM], pooled)?, argmax))
}

pub fn registration_forward_trace<T: Real>(
    net: &RegistrationNet<T>,
    input: &RegistrationInput<T>,
) -> Result<RegistrationTrace<T>> {
    let projector = net.projector.forward_trace(&input.patches)?;
    let mut h = projector.last().unwrap().clone();
    let mut blocks = vec![];
    for block in &net.blocks {
        let acts = block.forward_trace(&pair_matrix(&h, input)?)?;
        let (pooled, argmax) = max_pool(acts.last().unwrap(), input)?;
        blocks.push(BlockTrace { acts, argmax });
        h = pooled;
    }
    let classifier = net.classifier.forward_trace(&h)?;
    Ok(RegistrationTrace { projector, blocks, classifier })
}

/// One logit per hypothesis.
pub fn registration_forward<T: Real>(net: &RegistrationNet<T>, input: &RegistrationInput<T>) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Ok(vec![]);
    }
    Ok(registration_forward_trace(net, input)?.scores())
}

/// Accumulates parameter gradients for `d loss / d score`; the patches are
/// treated as constants.
pub fn registration_backward<T: Real>(
    net: &mut RegistrationNet<T>,
    input: &RegistrationInput<T>,
    trace: &RegistrationTrace<T>,
    score_grad: &[f64],
) -> Result<()> {
    let n = input.len();
    let up = Tensor::from_vec(&[n, 1], score_grad.iter().map(|g| T::lit(*g)).collect())?;
    let mut dh = net.classifier.backward(&trace.classifier, &up)?;
    for (block, bt) in net.blocks.iter_mut().zip(&trace.blocks).rev() {
        let mut d_out = Tensor::<T>::zeros(&[input.pairs.len(), BLOCK_DIM]);
        {
            let g = d_out.data_mut();
            for (k, &row) in bt.argmax.iter().enumerate() {
                g[row * BLOCK_DIM + k % BLOCK_DIM] += dh.data()[k];
            }
        }
        let d_pairs = block.backward(&bt.acts, &d_out)?;
        let width = d_pairs.shape()[1];
        let d = (width - RELATION_DIM) / 2;
        let mut next = Tensor::<T>::zeros(&[n, d]);
        {
            let g = next.data_mut();
            for (row, (i, j)) in input.pairs.iter().enumerate() {
                let src = &d_pairs.data()[row * width..][..width];
                for c in 0..d {
                    g[i * d + c] += src[c];
                    g[j * d + c] += src[d + c];
                }
            }
        }
        dh = next;
    }
    net.projector.backward(&trace.projector, &dh)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledHypothesis {
    pub hypothesis: PoseHypothesis,
    /// +1 true positive, -1 false positive.
    pub label: i8,
    pub weight: f64,
}

/// Greedy descending-confidence one-to-one matching: a hypothesis is +1 when
/// its symmetry-aware distance to the nearest unmatched ground truth is
/// below `threshold`, consuming that ground truth.
pub fn assign_labels(
    hypotheses: &[PoseHypothesis],
    ground_truth: &[crate::geometry::Pose6D],
    model: &MeshModel,
    threshold: f64,
    cfg: &JointRegConfig,
) -> Result<Vec<LabeledHypothesis>> {
    let mut order: Vec<usize> = (0..hypotheses.len()).collect();
    order.sort_by(|&a, &b| hypotheses[b].confidence.total_cmp(&hypotheses[a].confidence));
    let mut used = vec![false; ground_truth.len()];
    let mut labels = vec![-1i8; hypotheses.len()];
    for i in order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if used[g] {
                continue;
            }
            let d = sym_distance(&hypotheses[i].pose, gt, model)?;
            if d < threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        if let Some((_, g)) = best {
            used[g] = true;
            labels[i] = 1;
        }
    }
    Ok(hypotheses
        .iter()
        .zip(labels)
        .map(|(h, label)| LabeledHypothesis {
            hypothesis: *h,
            label,
            weight: if label > 0 { cfg.positive_weight } else { cfg.negative_weight },
        })
        .collect())
}

/// `sum_i a_i ln(1 + exp(-f_i y_i))` and its gradient in `f`.
pub fn registration_loss(scores: &[f64], labels: &[LabeledHypothesis]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&f, l) in scores.iter().zip(labels) {
        let m = -f * l.label as f64;
        // ln(1 + e^m) without overflow
        loss += l.weight * (m.max(0.0) + (-m.abs()).exp().ln_1p());
        grad.push(-l.weight * l.label as f64 * sigmoid(m));
    }
    Ok((loss, grad))
}

/// Hypothesis with its registration logit; `confidence` holds `sigmoid(score)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rescored {
    pub hypothesis: PoseHypothesis,
    pub score: f64,
}

/// Drops hypotheses with `score <= keep_threshold` and ranks the rest by
/// descending score (ties keep input order).
pub fn rescore_and_filter(hypotheses: &[PoseHypothesis], scores: &[f64], keep_threshold: f64) -> Result<Vec<Rescored>> {
    if scores.len() != hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} hypotheses",
            scores.len(),
            hypotheses.len()
        )));
    }
    let mut out: Vec<Rescored> = hypotheses
        .iter()
        .zip(scores)
        .filter(|(_, s)| **s > keep_threshold)
        .map(|(h, &s)| Rescored {
            hypothesis: PoseHypothesis {
                confidence: sigmoid(s),
                ..*h
            },
            score: s,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
