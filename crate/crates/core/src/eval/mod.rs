//! Matching-based evaluation: Sym / ADD acceptance, PR curves, AP and F1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{add_distance, sym_distance, MeshModel, Pose6D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Sym,
    Add,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Sym => "sym",
            Criterion::Add => "add",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" => Ok(Criterion::Sym),
            "add" => Ok(Criterion::Add),
            other => Err(Error::Config(format!("unknown criterion `{other}` (expected sym or add)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub criterion: Criterion,
    pub threshold_factor: f64,
    /// Ground truths less visible than this are ignored: they are not
    /// counted as misses and predictions matching them are not scored.
    pub min_visibility: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            criterion: Criterion::Sym,
            threshold_factor: 0.1,
            min_visibility: 0.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_factor > 0.0) {
            return Err(Error::Config("threshold factor must be positive".into()));
        }
        Ok(())
    }

    /// Acceptance distance in meters: a fraction of the bounding-sphere
    /// diameter (Sym) or of the object diameter (ADD).
    pub fn threshold(&self, model: &MeshModel) -> f64 {
        match self.criterion {
            Criterion::Sym => self.threshold_factor * model.bsphere_diameter,
            Criterion::Add => self.threshold_factor * model.diameter,
        }
    }

    pub fn distance(&self, p: &Pose6D, q: &Pose6D, model: &MeshModel) -> Result<f64> {
        match self.criterion {
            Criterion::Sym => sym_distance(p, q, model),
            Criterion::Add => add_distance(p, q, model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pose: Pose6D,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pose: Pose6D,
    pub visibility: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched an ignored ground truth.
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMatch {
    /// `(confidence, flag)` in descending-confidence order.
    pub flags: Vec<(f64, MatchFlag)>,
    /// Ground truths that count toward recall.
    pub n_gt: usize,
}

/// Greedy one-to-one matching: in descending confidence, each prediction
/// takes the nearest unmatched ground truth closer than the threshold.
pub fn match_frame(
    predictions: &[Prediction],
    ground_truths: &[GroundTruth],
    model: &MeshModel,
    cfg: &EvalConfig,
) -> Result<FrameMatch> {
    let thr = cfg.threshold(model);
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].confidence.total_cmp(&predictions[a].confidence));
    let counted: Vec<bool> = ground_truths.iter().map(|g| g.visibility >= cfg.min_visibility).collect();
    let mut used = vec![false; ground_truths.len()];
    let mut flags = Vec::with_capacity(predictions.len());
    for i in order {
        let p = &predictions[i];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if used[g] {
                continue;
            }
            let d = cfg.distance(&p.pose, &gt.pose, model)?;
            // counted ground truths take precedence over ignored ones
            let better = match best {
                None => true,
                Some((bd, bg)) => (counted[g], -d) > (counted[bg], -bd),
            };
            if d < thr && better {
                best = Some((d, g));
            }
        }
        let flag = match best {
            Some((_, g)) => {
                used[g] = true;
                if counted[g] {
                    MatchFlag::Tp
                } else {
                    MatchFlag::Ignored
                }
            }
            None => MatchFlag::Fp,
        };
        flags.push((p.confidence, flag));
    }
    Ok(FrameMatch {
        flags,
        n_gt: counted.iter().filter(|c| **c).count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub rank: usize,
    pub confidence: f64,
    pub tp: bool,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub total_gt: usize,
}

/// Ranks all scored predictions globally (stable for equal confidences).
pub fn pr_curve(entries: &[(f64, bool)], total_gt: usize) -> PRCurve {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[b].0.total_cmp(&entries[a].0));
    let mut tp = 0usize;
    let points = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let (confidence, is_tp) = entries[i];
            tp += is_tp as usize;
            PRPoint {
                rank: rank + 1,
                confidence,
                tp: is_tp,
                precision: tp as f64 / (rank + 1) as f64,
                recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
            }
        })
        .collect();
    PRCurve { points, total_gt }
}

/// Area under the precision envelope: each recall step is weighted by the
/// best precision at that or any later rank.
pub fn average_precision(curve: &PRCurve) -> Result<f64> {
    if curve.total_gt == 0 {
        return Err(Error::Data("average precision needs at least one ground truth".into()));
    }
    let mut envelope = vec![0.0; curve.points.len()];
    let mut best = 0.0f64;
    for (e, p) in envelope.iter_mut().zip(&curve.points).rev() {
        best = best.max(p.precision);
        *e = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, e) in curve.points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * e;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Best `2PR / (P + R)` over ranks; 0 when no rank has a true positive.
pub fn f1_best(curve: &PRCurve) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.precision + p.recall > 0.0)
        .map(|p| 2.0 * p.precision * p.recall / (p.precision + p.recall))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub criterion: Criterion,
    pub ap: f64,
    pub f1_best: f64,
    pub n_predictions: usize,
    pub n_gt: usize,
    pub n_tp: usize,
    pub frames: Vec<FrameMatch>,
    pub curve: PRCurve,
}

/// Matches every frame and aggregates AP / F1 over the global ranking.
pub fn evaluate(
    frames: &[(Vec<Prediction>, Vec<GroundTruth>)],
    model: &MeshModel,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    cfg.validate()?;
    let matches = frames
        .iter()
        .map(|(p, g)| match_frame(p, g, model, cfg))
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.flags.iter())
        .filter(|(_, f)| *f != MatchFlag::Ignored)
        .map(|(c, f)| (*c, *f == MatchFlag::Tp))
        .collect();
    let n_gt = matches.iter().map(|m| m.n_gt).sum();
    let curve = pr_curve(&entries, n_gt);
    Ok(Metrics {
        criterion: cfg.criterion,
        ap: average_precision(&curve)?,
        f1_best: f1_best(&curve),
        n_predictions: entries.len(),
        n_gt,
        n_tp: entries.iter().filter(|e| e.1).count(),
        frames: matches,
        curve,
    })
}

/// PR curve as CSV: `rank,confidence,tp,precision,recall`.
pub fn curve_csv(curve: &PRCurve) -> String {
    let mut s = String::from("rank,confidence,tp,precision,recall\n");
    for p in &curve.points {
        writeln!(s, "{},{},{},{},{}", p.rank, p.confidence, p.tp as u8, p.precision, p.recall).unwrap();
    }
    s
}

/// Writes `<stem>.json` (metrics) and `<stem>_pr.csv` into `dir`.
pub fn report(metrics: &Metrics, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let csv_path = dir.join(format!("{stem}_pr.csv"));
    let json = serde_json::to_string_pretty(metrics).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    std::fs::write(&csv_path, curve_csv(&metrics.curve)).map_err(|e| Error::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}
