//! Per-detection 6D pose hypotheses: center offset, binned rotation and
//! depth classification, confidence-product enumeration, pose NMS and top-n.

mod bins;
mod heads;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sym_distance, Box2D, MeshModel, Pose6D};
use crate::scenegen::Intrinsics;
pub use bins::{canonical_rotation, BinSpec, HeadConfig};
pub use heads::{
    class_heads_forward, classification_loss, decode_center, decode_translation, normalize_center, offset_loss,
    roi_backward, roi_extract, Head, HeadProbs, PoseHeads, RoiPatch, HIDDEN, ROI_FEATURES, ROI_SIZE,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    /// Camera frame.
    pub pose: Pose6D,
    pub confidence: f64,
    pub detection_index: usize,
    pub bbox: Box2D,
}

/// Indices of the `k` largest entries, ties to the lower index.
fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx.truncate(k);
    idx
}

/// Cartesian product of the top-`k` bins of every present head, scored by
/// the product of the selected probabilities, sorted by descending confidence.
pub fn enumerate_hypotheses(
    probs: &HeadProbs,
    center2d: [f64; 2],
    cfg: &HeadConfig,
    k: usize,
    intr: &Intrinsics,
    detection_index: usize,
    bbox: Box2D,
) -> Vec<PoseHypothesis> {
    let angle_choices = |spec: Option<BinSpec>, p: &Option<Vec<f64>>| -> Vec<(f64, f64)> {
        match (spec, p) {
            (Some(s), Some(p)) => top_k(p, k).into_iter().map(|b| (s.center(b), p[b])).collect(),
            _ => vec![(0.0, 1.0)],
        }
    };
    let pitch = angle_choices(cfg.pitch, &probs.pitch);
    let roll = angle_choices(cfg.roll, &probs.roll);
    let yaw: Vec<(f64, f64)> = top_k(&probs.yaw, k)
        .into_iter()
        .map(|b| (cfg.yaw.center(b), probs.yaw[b]))
        .collect();
    let depth = top_k(&probs.depth, k);
    let mut out = Vec::with_capacity(pitch.len() * yaw.len() * roll.len() * depth.len());
    for &(p, pp) in &pitch {
        for &(y, py) in &yaw {
            for &(r, pr) in &roll {
                for &d in &depth {
                    let t = decode_translation(center2d, d, &cfg.depth, intr);
                    out.push(PoseHypothesis {
                        pose: Pose6D::new(p, y, r, t),
                        confidence: pp * py * pr * probs.depth[d],
                        detection_index,
                        bbox,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

/// Greedy descending-confidence suppression of hypotheses closer than
/// `threshold` (meters, symmetry-aware) to an already kept one.
pub fn pose_nms(hypotheses: &[PoseHypothesis], model: &MeshModel, threshold: f64) -> Result<Vec<PoseHypothesis>> {
    let mut order: Vec<usize> = (0..hypotheses.len()).collect();
    order.sort_by(|&a, &b| hypotheses[b].confidence.total_cmp(&hypotheses[a].confidence));
    let mut kept: Vec<PoseHypothesis> = vec![];
    'next: for i in order {
        let h = &hypotheses[i];
        for k in &kept {
            if sym_distance(&k.pose, &h.pose, model)? < threshold {
                continue 'next;
            }
        }
        kept.push(*h);
    }
    Ok(kept)
}

/// The `n` most confident hypotheses, equal confidences in input order.
pub fn select_top(hypotheses: &[PoseHypothesis], n: usize) -> Vec<PoseHypothesis> {
    let mut v = hypotheses.to_vec();
    v.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    v.truncate(n);
    v
}

/// One line of the hypothesis dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub frame: String,
    pub detection: usize,
    pub pose: Pose6D,
    pub confidence: f64,
    pub bbox: Box2D,
    /// Joint-registration logit, when rescored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn write_dump(path: &Path, records: &[HypothesisRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Vec<HypothesisRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![];
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
