use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{generate_dataset, load_frames, load_manifest, DatasetManifest, Split};
use super::model::{
    infer_frame, new_registration_net, register_frame, registration_checkpoint, registration_from_checkpoint,
    registration_samples, train_heads, train_registration, PoseNet,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, report, Criterion, EvalConfig, GroundTruth, Metrics, Prediction};
use crate::geometry::MeshModel;
use crate::numerics::Checkpoint;
use crate::posehyp::{read_dump, write_dump, HypothesisRecord};
use crate::render::FrameAnnotation;

pub const DATASET_DIR: &str = "dataset";
pub const HEADS_CKPT: &str = "heads.ckpt";
pub const JOINTREG_CKPT: &str = "jointreg.ckpt";
pub const HEADS_LOSS: &str = "heads_loss.csv";
pub const JOINTREG_LOSS: &str = "jointreg_loss.csv";

/// Which confidence ranks the predictions of a dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Product of the head probabilities, top-n per detection.
    Raw,
    /// Joint-registration score after filtering.
    Registered,
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Raw => "raw",
            Source::Registered => "registered",
        }
    }

    pub fn dump_name(&self) -> &'static str {
        match self {
            Source::Raw => "hypotheses_raw.jsonl",
            Source::Registered => "hypotheses.jsonl",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Source::Raw),
            "registered" => Ok(Source::Registered),
            other => Err(Error::Config(format!("unknown confidence source `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Heads,
    JointReg,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads" => Ok(Stage::Heads),
            "jointreg" => Ok(Stage::JointReg),
            other => Err(Error::Config(format!("unknown training stage `{other}`"))),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(cfg: &RunConfig, model: &MeshModel, out: &Path) -> Result<DatasetManifest> {
    let m = generate_dataset(cfg, model, &out.join(DATASET_DIR))?;
    log::info!(
        "generated {} scenes ({} train, {} test frames)",
        m.scenes.len(),
        m.frames(Split::Train).count(),
        m.frames(Split::Test).count()
    );
    Ok(m)
}

fn load_split(cfg: &RunConfig, out: &Path, split: Split) -> Result<Vec<super::dataset::Frame>> {
    let dir = out.join(DATASET_DIR);
    let manifest = load_manifest(cfg, &dir)?;
    load_frames(&dir, &manifest, split)
}

pub fn load_heads(cfg: &RunConfig, model: &MeshModel, out: &Path) -> Result<PoseNet> {
    let path = out.join(HEADS_CKPT);
    if !path.is_file() {
        return Err(Error::Data(format!("{} not found; run `train --stage heads` first", path.display())));
    }
    PoseNet::from_checkpoint(cfg, model, &Checkpoint::read(&path)?)
}

/// Trains one stage on the train split and writes its checkpoint and loss trace.
pub fn cmd_train(cfg: &RunConfig, model: &MeshModel, out: &Path, stage: Stage) -> Result<PathBuf> {
    let frames = load_split(cfg, out, Split::Train)?;
    match stage {
        Stage::Heads => {
            let mut net = PoseNet::new(cfg, model)?;
            let steps = cfg.train.heads_steps;
            let trace = train_heads(&mut net, &frames, model, cfg, steps, |s, l| {
                if (s + 1) % 100 == 0 || s + 1 == steps {
                    log::info!("heads step {}/{steps}: loss {:.4}", s + 1, l.total);
                }
            })?;
            let mut csv = String::from("step,total,detection,offset,depth,pose\n");
            for (i, l) in trace.iter().enumerate() {
                writeln!(csv, "{i},{},{},{},{},{}", l.total, l.detection, l.offset, l.depth, l.pose).unwrap();
            }
            write_text(&out.join(HEADS_LOSS), &csv)?;
            let path = out.join(HEADS_CKPT);
            net.checkpoint().write(&path)?;
            Ok(path)
        }
        Stage::JointReg => {
            let net = load_heads(cfg, model, out)?;
            let samples = registration_samples(&net, &frames, model, cfg)?;
            let mut jr = new_registration_net(cfg);
            let steps = cfg.train.jointreg_steps;
            let trace = train_registration(&mut jr, &samples, model, &net.head_cfg, cfg, steps, |s, l| {
                if (s + 1) % 100 == 0 || s + 1 == steps {
                    log::info!("jointreg step {}/{steps}: loss {l:.4}", s + 1);
                }
            })?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in trace.iter().enumerate() {
                writeln!(csv, "{i},{l}").unwrap();
            }
            write_text(&out.join(JOINTREG_LOSS), &csv)?;
            let path = out.join(JOINTREG_CKPT);
            registration_checkpoint(&jr).write(&path)?;
            Ok(path)
        }
    }
}

/// Raw and (when a registration checkpoint exists) registered dumps for a split.
pub fn cmd_infer(cfg: &RunConfig, model: &MeshModel, out: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let net = load_heads(cfg, model, out)?;
    let jr_path = out.join(JOINTREG_CKPT);
    let jr = if jr_path.is_file() {
        Some(registration_from_checkpoint(cfg, &Checkpoint::read(&jr_path)?)?)
    } else {
        log::warn!("{} not found; writing the raw dump only", jr_path.display());
        None
    };
    let frames = load_split(cfg, out, split)?;
    let per_frame = frames
        .par_iter()
        .map(|f| -> Result<(Vec<HypothesisRecord>, Vec<HypothesisRecord>)> {
            let inf = infer_frame(&net, &f.image, &f.annotation.view.intrinsics, model, cfg)?;
            let record = |h: &crate::posehyp::PoseHypothesis, score| HypothesisRecord {
                frame: f.id.clone(),
                detection: h.detection_index,
                pose: h.pose,
                confidence: h.confidence,
                bbox: h.bbox,
                score,
            };
            let raw = inf.hypotheses.iter().map(|h| record(h, None)).collect();
            let registered = match &jr {
                Some(jr) => register_frame(jr, &inf, model, &net.head_cfg, cfg.jointreg.keep_threshold)?
                    .iter()
                    .map(|r| record(&r.hypothesis, Some(r.score)))
                    .collect(),
                None => vec![],
            };
            Ok((raw, registered))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![];
    let mut registered = vec![];
    for (r, g) in per_frame {
        raw.extend(r);
        registered.extend(g);
    }
    let mut written = vec![out.join(Source::Raw.dump_name())];
    write_dump(&written[0], &raw)?;
    if jr.is_some() {
        let p = out.join(Source::Registered.dump_name());
        write_dump(&p, &registered)?;
        written.push(p);
    }
    log::info!("{} frames, {} raw / {} registered hypotheses", frames.len(), raw.len(), registered.len());
    Ok(written)
}

/// Ground truth of every frame of a split, keyed by frame id.
pub fn load_annotations(cfg: &RunConfig, out: &Path, split: Split) -> Result<BTreeMap<String, FrameAnnotation>> {
    let dir = out.join(DATASET_DIR);
    let manifest = load_manifest(cfg, &dir)?;
    manifest
        .frames(split)
        .map(|e| {
            let path = dir.join(&e.annotation);
            let text = std::fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
            let ann = serde_json::from_str(&text).map_err(|err| Error::Data(format!("{}: {err}", path.display())))?;
            Ok((e.id.clone(), ann))
        })
        .collect()
}

/// Pairs dump records with the split's annotations; every split frame is
/// evaluated, including those without predictions.
pub fn evaluation_frames(
    records: &[HypothesisRecord],
    annotations: &BTreeMap<String, FrameAnnotation>,
) -> Result<Vec<(Vec<Prediction>, Vec<GroundTruth>)>> {
    let mut preds: BTreeMap<&str, Vec<Prediction>> = annotations.keys().map(|k| (k.as_str(), vec![])).collect();
    for r in records {
        let slot = preds
            .get_mut(r.frame.as_str())
            .ok_or_else(|| Error::Data(format!("dump references unknown frame `{}`", r.frame)))?;
        slot.push(Prediction {
            pose: r.pose,
            confidence: r.confidence,
        });
    }
    Ok(annotations
        .iter()
        .map(|(id, ann)| {
            let gts = ann
                .instances
                .iter()
                .map(|a| GroundTruth {
                    pose: a.pose,
                    visibility: a.visibility,
                })
                .collect();
            (preds.remove(id.as_str()).unwrap_or_default(), gts)
        })
        .collect())
}

pub fn eval_dir(out: &Path, source: Source) -> PathBuf {
    out.join("eval").join(source.name())
}

/// Evaluates a dump under each criterion, writing `<criterion>.json` and
/// `<criterion>_pr.csv` under `eval/<source>/`.
pub fn cmd_eval(
    cfg: &RunConfig,
    model: &MeshModel,
    out: &Path,
    split: Split,
    source: Source,
    criteria: &[Criterion],
) -> Result<Vec<Metrics>> {
    let dump = out.join(source.dump_name());
    let records = read_dump(&dump)?;
    let annotations = load_annotations(cfg, out, split)?;
    let frames = evaluation_frames(&records, &annotations)?;
    let mut all = vec![];
    for &criterion in criteria {
        let ec = EvalConfig { criterion, ..cfg.eval.clone() };
        let m = evaluate(&frames, model, &ec)?;
        report(&m, &eval_dir(out, source), criterion.name())?;
        log::info!("{} {}: AP {:.4}, best F1 {:.4}", source.name(), criterion.name(), m.ap, m.f1_best);
        all.push(m);
    }
    Ok(all)
}

#[derive(Clone, Debug, Deserialize)]
struct MetricsSummary {
    ap: f64,
    f1_best: f64,
    n_predictions: usize,
    n_gt: usize,
    n_tp: usize,
}

#[derive(Clone, Debug, Deserialize)]
struct CurvePoint {
    precision: f64,
    recall: f64,
}

#[derive(Clone, Debug, Deserialize)]
struct MetricsCurve {
    curve: CurveOnly,
}

#[derive(Clone, Debug, Deserialize)]
struct CurveOnly {
    points: Vec<CurvePoint>,
}

fn read_metrics<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Merges `(label, eval dir)` pairs into one ablation table with a row per
/// configuration, plus the concatenated PR curves.
pub fn cmd_report(inputs: &[(String, PathBuf)], out: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut table = String::from("config,ap_sym,ap_add,f1_sym,f1_add,n_predictions,n_gt,tp_sym,tp_add\n");
    let mut curves = String::from("config,criterion,rank,precision,recall\n");
    for (label, dir) in inputs {
        if label.contains([',', '"', '\n']) {
            return Err(Error::Config(format!("report label `{label}` must not contain commas or quotes")));
        }
        let sym_path = dir.join("sym.json");
        let add_path = dir.join("add.json");
        let sym: MetricsSummary = read_metrics(&sym_path)?;
        let add: MetricsSummary = read_metrics(&add_path)?;
        writeln!(
            table,
            "{label},{},{},{},{},{},{},{},{}",
            sym.ap, add.ap, sym.f1_best, add.f1_best, sym.n_predictions, sym.n_gt, sym.n_tp, add.n_tp
        )
        .unwrap();
        for (name, path) in [("sym", &sym_path), ("add", &add_path)] {
            let m: MetricsCurve = read_metrics(path)?;
            for (i, p) in m.curve.points.iter().enumerate() {
                writeln!(curves, "{label},{name},{},{},{}", i + 1, p.precision, p.recall).unwrap();
            }
        }
    }
    let table_path = out.join("report.csv");
    let curve_path = out.join("report_pr.csv");
    write_text(&table_path, &table)?;
    write_text(&curve_path, &curves)?;
    Ok((table_path, curve_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::MANIFEST;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.train_scenes = 1;
        cfg.dataset.test_scenes = 1;
        cfg.views.count = 2;
        cfg.train.heads_steps = 2;
        cfg.train.jointreg_steps = 2;
        cfg
    }

    #[test]
    fn ground_truth_dump_scores_perfectly() {
        let cfg = small();
        let model = MeshModel::tripod();
        let dir = tempfile::tempdir().unwrap();
        cmd_gen(&cfg, &model, dir.path()).unwrap();
        let ann = load_annotations(&cfg, dir.path(), Split::Test).unwrap();
        let mut records = vec![];
        for (id, a) in &ann {
            for (k, inst) in a.instances.iter().enumerate() {
                records.push(HypothesisRecord {
                    frame: id.clone(),
                    detection: k,
                    pose: inst.pose,
                    // arbitrary order of confidences
                    confidence: ((k * 7919) % 13) as f64 / 13.0,
                    bbox: inst.bbox,
                    score: None,
                });
            }
        }
        write_dump(&dir.path().join(Source::Raw.dump_name()), &records).unwrap();
        let m = cmd_eval(&cfg, &model, dir.path(), Split::Test, Source::Raw, &[Criterion::Sym, Criterion::Add]).unwrap();
        assert!(m.iter().all(|m| m.ap == 1.0));

        write_dump(&dir.path().join(Source::Raw.dump_name()), &[]).unwrap();
        let m = cmd_eval(&cfg, &model, dir.path(), Split::Test, Source::Raw, &[Criterion::Sym]).unwrap();
        assert_eq!(m[0].ap, 0.0);

        records[0].frame = "99999_00".into();
        write_dump(&dir.path().join(Source::Raw.dump_name()), &records).unwrap();
        let e = cmd_eval(&cfg, &model, dir.path(), Split::Test, Source::Raw, &[Criterion::Sym]).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn stages_and_report() {
        let cfg = small();
        let model = MeshModel::tripod();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        assert!(matches!(cmd_train(&cfg, &model, out, Stage::Heads), Err(Error::Data(_) | Error::Io { .. })));
        cmd_gen(&cfg, &model, out).unwrap();
        assert!(out.join(DATASET_DIR).join(MANIFEST).is_file());
        assert!(matches!(cmd_train(&cfg, &model, out, Stage::JointReg), Err(Error::Data(_))));
        cmd_train(&cfg, &model, out, Stage::Heads).unwrap();
        let trace = std::fs::read_to_string(out.join(HEADS_LOSS)).unwrap();
        assert_eq!(trace.lines().count(), 1 + cfg.train.heads_steps);

        let dumps = cmd_infer(&cfg, &model, out, Split::Test).unwrap();
        assert_eq!(dumps.len(), 1);
        for c in [Criterion::Sym, Criterion::Add] {
            cmd_eval(&cfg, &model, out, Split::Test, Source::Raw, &[c]).unwrap();
        }
        let inputs = vec![("a".to_string(), eval_dir(out, Source::Raw)), ("b".to_string(), eval_dir(out, Source::Raw))];
        let (table, _) = cmd_report(&inputs, out).unwrap();
        let text = std::fs::read_to_string(&table).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("config,ap_sym,ap_add,"));
        let again = cmd_report(&inputs, out).unwrap();
        assert_eq!(std::fs::read_to_string(again.0).unwrap(), text);
    }
}
