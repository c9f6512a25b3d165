use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{artifact, read_string, require, write, PipelineConfig, PipelineError, Stage};
use crate::cohort::{compute_class_weights, parse_manifest, split_by_subject, ImageRecord, Split, SplitAssignment};
use crate::explain::{
    estimate_regions, grad_cam, mask_iou, masking_experiment, region_specs, render_overlay, threshold_attention,
    AttentionMap, Region, RegionSource, RegionSpec,
};
use crate::imaging::{decode_gray_png, decode_image_with, encode_gray_png, encode_png, resize_bilinear, to_tensor_normalized, BinaryMask, GrayImage, RasterImage};
use crate::metrics::{calibration_table_csv, metrics_csv, reliability_bins, scored_samples, task_metrics, CalibrationBins, TaskMetrics};
use crate::model::Checkpoint;
use crate::synthgen::{write_cohort, AnatomyMasks, CohortFiles};
use crate::training::{predict_dataset, train as train_net, Dataset, TrainConfig};
use crate::vesselseg::segment_vessels;
use crate::{rng, Task, TaskLabels, TASK_COUNT};

use crate::Network as Net;

pub fn load_records(cfg: &PipelineConfig) -> Result<Vec<ImageRecord>, PipelineError> {
    let text = read_string(&cfg.cohort_dir().join(CohortFiles::MANIFEST), Stage::Synth)?;
    parse_manifest(&text).map_err(PipelineError::runtime)
}

pub fn load_split(cfg: &PipelineConfig) -> Result<SplitAssignment, PipelineError> {
    let text = read_string(&cfg.out(artifact::SPLIT), Stage::Split)?;
    SplitAssignment::from_csv(&text).map_err(PipelineError::runtime)
}

/// Decodes, checks and resizes the images of `records` to the network
/// input size.
pub fn load_images(cfg: &PipelineConfig, records: &[&ImageRecord]) -> Result<Vec<RasterImage>, PipelineError> {
    let dir = cfg.cohort_dir();
    let (w, h) = (cfg.net.input_width, cfg.net.input_height);
    records
        .par_iter()
        .map(|r| {
            let path = dir.join(&r.image_path);
            let bytes = fs::read(&path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
            let img = decode_image_with(&bytes, &cfg.qc).map_err(|e| PipelineError::Runtime(format!("{}: {e}", path.display())))?;
            Ok(if (img.width(), img.height()) == (w, h) { img } else { resize_bilinear(&img, w, h) })
        })
        .collect()
}

/// Ground-truth mask of one region, resized to the network input.
fn load_mask(cfg: &PipelineConfig, record: &ImageRecord, region: &str) -> Result<BinaryMask, PipelineError> {
    let path = cfg.cohort_dir().join(CohortFiles::mask(CohortFiles::stem_of(&record.image_path), region));
    require(&path, Stage::Synth)?;
    let bytes = fs::read(&path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    let g = decode_gray_png(&bytes).map_err(PipelineError::runtime)?;
    let (w, h) = (cfg.net.input_width, cfg.net.input_height);
    // nearest neighbour keeps the mask binary
    let g = if (g.width, g.height) == (w, h) {
        g
    } else {
        let data = (0..w * h).map(|i| g.get((i % w) * g.width / w, (i / w) * g.height / h)).collect();
        GrayImage { width: w, height: h, data }
    };
    BinaryMask::from_nonzero(g.width, g.height, &g.data).map_err(PipelineError::runtime)
}

fn load_model(cfg: &PipelineConfig, name: &str) -> Result<Net, PipelineError> {
    let path = cfg.out(name);
    require(&path, Stage::Train)?;
    Checkpoint::load(&path).and_then(|c| c.to_net()).map_err(PipelineError::runtime)
}

struct SplitData<'a> {
    records: Vec<&'a ImageRecord>,
    images: Vec<RasterImage>,
    labels: Vec<TaskLabels>,
}

fn split_data<'a>(cfg: &PipelineConfig, records: &'a [ImageRecord], split: &SplitAssignment, which: Split) -> Result<SplitData<'a>, PipelineError> {
    let records = split.select(records, which);
    if records.is_empty() {
        return Err(PipelineError::Runtime(format!("{} split is empty", which.name())));
    }
    let images = load_images(cfg, &records)?;
    let labels = records.iter().map(|r| r.labels).collect();
    Ok(SplitData { records, images, labels })
}

/// The first `limit` test images (all when `limit` is 0).
fn head<T>(v: &[T], limit: usize) -> &[T] {
    if limit == 0 {
        v
    } else {
        &v[..limit.min(v.len())]
    }
}

pub(super) fn synth(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = cfg.cohort_dir();
    let records = write_cohort(&cfg.cohort, &dir).map_err(PipelineError::runtime)?;
    log::info!("wrote {} images to {}", records.len(), dir.display());
    Ok(vec![
        dir.join(CohortFiles::MANIFEST),
        dir.join("images"),
        dir.join("masks"),
        dir.join("sidecars"),
    ])
}

pub(super) fn split(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let records = load_records(cfg)?;
    let assignment = split_by_subject(&records, cfg.split.fractions, cfg.split.seed).map_err(PipelineError::runtime)?;
    let path = cfg.out(artifact::SPLIT);
    write(&path, assignment.to_csv().as_bytes())?;
    Ok(vec![path])
}

fn fit(cfg: &PipelineConfig, train_set: Dataset<'_>, val_set: Dataset<'_>, train_cfg: &TrainConfig, model: &str, log_name: &str) -> Result<Vec<PathBuf>, PipelineError> {
    let net = Net::init(cfg.net.clone(), cfg.model_seed).map_err(PipelineError::runtime)?;
    let outcome = train_net(net, train_set, val_set, train_cfg).map_err(PipelineError::runtime)?;
    let mut ckpt = Checkpoint::from_net(&outcome.best);
    ckpt.meta.insert("best_epoch".into(), serde_json::json!(outcome.log.best_epoch));
    ckpt.meta.insert("best_val_mean_auc".into(), serde_json::json!(outcome.log.best_mean_auc()));
    let (mpath, lpath) = (cfg.out(model), cfg.out(log_name));
    ckpt.save(&mpath).map_err(PipelineError::runtime)?;
    write(&lpath, outcome.log.to_csv().as_bytes())?;
    Ok(vec![mpath, lpath])
}

/// Permutes label rows with a seeded shuffle, breaking any image/label link.
fn shuffled_labels(labels: &[TaskLabels], seed: u64, tag: u64) -> Vec<TaskLabels> {
    let mut out = labels.to_vec();
    out.shuffle(&mut rng::stream(seed, &[0xc0c0, tag]));
    out
}

pub(super) fn train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let records = load_records(cfg)?;
    let split = load_split(cfg)?;
    let tr = split_data(cfg, &records, &split, Split::Train)?;
    let va = split_data(cfg, &records, &split, Split::Val)?;
    let mut train_cfg = cfg.train.clone();
    if train_cfg.loss.class_weighting {
        train_cfg.loss.class_weights = Some(compute_class_weights(tr.records.iter().copied()).map_err(PipelineError::runtime)?);
    }
    let mut out = fit(cfg, Dataset::new(&tr.images, &tr.labels), Dataset::new(&va.images, &va.labels), &train_cfg, artifact::MODEL, artifact::TRAIN_LOG)?;
    if cfg.explain.shuffled_control {
        // permutation keeps class counts, so the class weights still apply
        let tl = shuffled_labels(&tr.labels, cfg.explain.control_seed, 0);
        let vl = shuffled_labels(&va.labels, cfg.explain.control_seed, 1);
        out.extend(fit(cfg, Dataset::new(&tr.images, &tl), Dataset::new(&va.images, &vl), &train_cfg, artifact::CONTROL_MODEL, artifact::CONTROL_TRAIN_LOG)?);
    }
    Ok(out)
}

/// Per-task metrics and calibration as stored by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: Vec<TaskMetrics>,
    pub calibration: Vec<(Task, CalibrationBins)>,
}

pub(super) fn eval(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let net = load_model(cfg, artifact::MODEL)?;
    let records = load_records(cfg)?;
    let split = load_split(cfg)?;
    let te = split_data(cfg, &records, &split, Split::Test)?;
    let probs = predict_dataset(&net, &te.images, &cfg.train.norm, cfg.train.eval_batch).map_err(PipelineError::runtime)?;

    let mut pred = String::from("image_path,subject_id,p_hba1c,p_kidney,p_multi,label_hba1c,label_kidney,label_multi\n");
    for ((r, p), l) in te.records.iter().zip(&probs).zip(&te.labels) {
        let lab = |t: Task| l.get(t).map(|b| u8::from(b).to_string()).unwrap_or_default();
        let _ = writeln!(pred, "{},{},{},{},{},{},{},{}", r.image_path, r.subject_id, p[0], p[1], p[2], lab(Task::Hba1c), lab(Task::Kidney), lab(Task::Multi));
    }
    let mut tasks = Vec::new();
    let mut calibration = Vec::new();
    for task in Task::ALL {
        let scores: Vec<f64> = probs.iter().map(|p| p[task.index()]).collect();
        let y: Vec<Option<bool>> = te.labels.iter().map(|l| l.get(task)).collect();
        let samples = scored_samples(&scores, &y);
        tasks.push(task_metrics(task, &samples).map_err(|e| PipelineError::Runtime(format!("{task}: {e}")))?);
        calibration.push((task, reliability_bins(&samples).map_err(PipelineError::runtime)?));
    }
    let paths = [artifact::PREDICTIONS, artifact::METRICS, artifact::CALIBRATION, artifact::EVAL_JSON].map(|a| cfg.out(a));
    write(&paths[0], pred.as_bytes())?;
    write(&paths[1], metrics_csv(&tasks).as_bytes())?;
    write(&paths[2], calibration_table_csv(&calibration).as_bytes())?;
    let summary = EvalSummary { tasks, calibration };
    write(&paths[3], serde_json::to_string_pretty(&summary).map_err(PipelineError::runtime)?.as_bytes())?;
    Ok(paths.to_vec())
}

/// Attention maps of every task for one image.
fn attention_maps(net: &Net, img: &RasterImage, cfg: &PipelineConfig) -> Result<Vec<AttentionMap>, PipelineError> {
    let x = to_tensor_normalized::<f64>(img, &cfg.train.norm);
    let cache = net.forward_eval(std::slice::from_ref(&x)).map_err(PipelineError::runtime)?;
    Task::ALL.iter().map(|&t| grad_cam(net, &cache, 0, t).map_err(PipelineError::runtime)).collect()
}

pub(super) fn explain(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let net = load_model(cfg, artifact::MODEL)?;
    let records = load_records(cfg)?;
    let split = load_split(cfg)?;
    let test = split.select(&records, Split::Test);
    let test = head(&test, cfg.explain.overlay_images.max(1));
    let images = load_images(cfg, test)?;
    let mut out = Vec::new();
    for (r, img) in test.iter().zip(&images) {
        let stem = CohortFiles::stem_of(&r.image_path);
        for a in attention_maps(&net, img, cfg)? {
            let base = format!("{stem}_{}", a.task);
            let png = cfg.out(&format!("{}/{base}.png", artifact::ATTENTION_DIR));
            let raw = cfg.out(&format!("{}/{base}.atn", artifact::ATTENTION_DIR));
            let overlay = cfg.out(&format!("{}/{base}.png", artifact::OVERLAY_DIR));
            write(&png, &encode_gray_png(&a.to_gray()).map_err(PipelineError::runtime)?)?;
            let mut bytes = Vec::new();
            a.write_raw(&mut bytes).map_err(PipelineError::runtime)?;
            write(&raw, &bytes)?;
            let o = render_overlay(img, &a).map_err(PipelineError::runtime)?;
            write(&overlay, &encode_png(&o).map_err(PipelineError::runtime)?)?;
            out.extend([png, raw, overlay]);
        }
    }
    Ok(out)
}

/// Vessel masks used as the IoU reference.
fn vessel_masks(cfg: &PipelineConfig, records: &[&ImageRecord], images: &[RasterImage]) -> Result<Vec<BinaryMask>, PipelineError> {
    match cfg.explain.region_source {
        RegionSource::GroundTruth => records.iter().map(|r| load_mask(cfg, r, "vessel")).collect(),
        RegionSource::Estimated => images.par_iter().map(|img| segment_vessels(img, &cfg.seg).map_err(PipelineError::runtime)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouStats {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub both_empty: usize,
}

impl IouStats {
    fn of(values: &[(f64, bool)]) -> Self {
        let n = values.len();
        let mean = values.iter().map(|v| v.0).sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 { values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        IouStats { n, mean, sd: var.sqrt(), both_empty: values.iter().filter(|v| v.1).count() }
    }
}

pub(super) fn xai_iou(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let net = load_model(cfg, artifact::MODEL)?;
    let control = if cfg.explain.shuffled_control { Some(load_model(cfg, artifact::CONTROL_MODEL)?) } else { None };
    let records = load_records(cfg)?;
    let split = load_split(cfg)?;
    let test = split.select(&records, Split::Test);
    let test = head(&test, cfg.explain.iou_images);
    let images = load_images(cfg, test)?;
    let vessels = vessel_masks(cfg, test, &images)?;
    let tau = cfg.explain.attention_threshold;
    let ious = |net: &Net| -> Result<Vec<[(f64, bool); TASK_COUNT]>, PipelineError> {
        images
            .par_iter()
            .zip(&vessels)
            .map(|(img, v)| {
                let maps = attention_maps(net, img, cfg)?;
                let mut row = [(0.0, false); TASK_COUNT];
                for a in maps {
                    let r = mask_iou(&threshold_attention(&a, tau), v).map_err(PipelineError::runtime)?;
                    row[a.task.index()] = (r.iou, r.both_empty);
                }
                Ok(row)
            })
            .collect()
    };
    let model_iou = ious(&net)?;
    let control_iou = control.as_ref().map(ious).transpose()?;

    let mut csv = String::from("image_path,task,iou,both_empty,control_iou,control_both_empty\n");
    for (i, r) in test.iter().enumerate() {
        for task in Task::ALL {
            let (m, me) = model_iou[i][task.index()];
            let (c, ce) = control_iou.as_ref().map(|c| (c[i][task.index()].0.to_string(), c[i][task.index()].1.to_string())).unwrap_or_default();
            let _ = writeln!(csv, "{},{task},{m},{me},{c},{ce}", r.image_path);
        }
    }
    let mut summary = BTreeMap::new();
    for task in Task::ALL {
        let col = |v: &[[(f64, bool); TASK_COUNT]]| v.iter().map(|r| r[task.index()]).collect::<Vec<_>>();
        let model = IouStats::of(&col(&model_iou));
        let control = control_iou.as_ref().map(|c| IouStats::of(&col(c)));
        summary.insert(task, super::TaskIouSummary { model, control, threshold: tau });
    }
    let paths = [cfg.out(artifact::IOU), cfg.out(artifact::IOU_SUMMARY)];
    write(&paths[0], csv.as_bytes())?;
    write(&paths[1], serde_json::to_string_pretty(&super::IouSummary { tasks: summary }).map_err(PipelineError::runtime)?.as_bytes())?;
    Ok(paths.to_vec())
}

fn ground_truth_regions(cfg: &PipelineConfig, record: &ImageRecord) -> Result<BTreeMap<Region, RegionSpec>, PipelineError> {
    let masks = AnatomyMasks {
        vessel: load_mask(cfg, record, "vessel")?,
        disc: load_mask(cfg, record, "disc")?,
        macula: load_mask(cfg, record, "macula")?,
        background: load_mask(cfg, record, "background")?,
    };
    Ok(region_specs(&masks, RegionSource::GroundTruth))
}

pub(super) fn mask_exp(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let net = load_model(cfg, artifact::MODEL)?;
    let records = load_records(cfg)?;
    let split = load_split(cfg)?;
    let te = split_data(cfg, &records, &split, Split::Test)?;
    let regions = match cfg.explain.region_source {
        RegionSource::GroundTruth => te.records.iter().map(|r| ground_truth_regions(cfg, r)).collect::<Result<Vec<_>, _>>()?,
        RegionSource::Estimated => te
            .images
            .par_iter()
            .map(|img| estimate_regions(img, &cfg.seg).map_err(PipelineError::runtime))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let report = masking_experiment(&net, &te.images, &te.labels, &regions, &Region::ALL, &Task::ALL, &cfg.train.norm, cfg.train.eval_batch)
        .map_err(PipelineError::runtime)?;
    let path = cfg.out(artifact::MASKING);
    write(&path, report.to_csv().as_bytes())?;
    Ok(vec![path])
}
