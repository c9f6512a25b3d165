use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::stages::{load_records, load_split, EvalSummary, IouStats};
use super::{artifact, read_string, write, PipelineConfig, PipelineError, ReportFormat, Stage};
use crate::cohort::{ImageRecord, Split};
use crate::explain::{MaskingReport, MaskingRow, Region};
use crate::metrics::CalibrationBins;
use crate::{Task, TASK_COUNT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskIouSummary {
    pub threshold: f32,
    pub model: IouStats,
    pub control: Option<IouStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub tasks: BTreeMap<Task, TaskIouSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub images: usize,
    pub subjects: usize,
    /// Labeled images per task.
    pub labeled: [usize; TASK_COUNT],
    pub positive: [usize; TASK_COUNT],
    /// `positive / labeled`, `None` without labels.
    pub prevalence: [Option<f64>; TASK_COUNT],
}

impl SplitSummary {
    fn of<'a>(records: impl IntoIterator<Item = &'a ImageRecord>) -> Self {
        let mut subjects = std::collections::BTreeSet::new();
        let (mut images, mut labeled, mut positive) = (0, [0; TASK_COUNT], [0; TASK_COUNT]);
        for r in records {
            images += 1;
            subjects.insert(r.subject_id.as_str());
            for task in Task::ALL {
                if let Some(y) = r.labels.get(task) {
                    labeled[task.index()] += 1;
                    positive[task.index()] += usize::from(y);
                }
            }
        }
        let prevalence = std::array::from_fn(|t| (labeled[t] > 0).then(|| positive[t] as f64 / labeled[t] as f64));
        SplitSummary { images, subjects: subjects.len(), labeled, positive, prevalence }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub all: SplitSummary,
    pub splits: BTreeMap<Split, SplitSummary>,
}

/// The five thresholded and ranking columns reported per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetricsRow {
    pub task: Task,
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset_summary: DatasetSummary,
    pub test_metrics: Vec<TestMetricsRow>,
    pub iou_summary: IouSummary,
    pub masking_deltas: Vec<MaskingRow>,
    pub calibration: BTreeMap<Task, CalibrationBins>,
}

pub fn write_report(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let records = load_records(cfg)?;
    let split = load_split(cfg)?;
    let eval: EvalSummary = serde_json::from_str(&read_string(&cfg.out(artifact::EVAL_JSON), Stage::Eval)?).map_err(PipelineError::runtime)?;
    let iou: IouSummary = serde_json::from_str(&read_string(&cfg.out(artifact::IOU_SUMMARY), Stage::XaiIou)?).map_err(PipelineError::runtime)?;
    let masking = MaskingReport::from_csv(&read_string(&cfg.out(artifact::MASKING), Stage::MaskExp)?).map_err(PipelineError::runtime)?;

    let dataset_summary = DatasetSummary {
        all: SplitSummary::of(&records),
        splits: Split::ALL.into_iter().map(|s| (s, SplitSummary::of(split.select(&records, s)))).collect(),
    };
    let test_metrics = eval
        .tasks
        .iter()
        .map(|m| TestMetricsRow {
            task: m.task,
            auc: m.auc,
            accuracy: m.accuracy.value,
            sensitivity: m.sensitivity.value,
            specificity: m.specificity.value,
            f1: m.f1.value,
        })
        .collect();
    let masking_deltas = masking.rows.into_iter().filter(|r| Region::ANATOMICAL.contains(&r.region)).collect();
    let report = Report {
        dataset_summary,
        test_metrics,
        iou_summary: iou,
        masking_deltas,
        calibration: eval.calibration.into_iter().collect(),
    };

    let mut out = Vec::new();
    if cfg.report_formats.contains(&ReportFormat::Json) {
        let p = cfg.out(artifact::REPORT);
        write(&p, serde_json::to_string_pretty(&report).map_err(PipelineError::runtime)?.as_bytes())?;
        out.push(p);
    }
    if cfg.report_formats.contains(&ReportFormat::Csv) {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut m = String::from("task,auc,accuracy,sensitivity,specificity,f1\n");
        for r in &report.test_metrics {
            let _ = writeln!(m, "{},{},{},{},{},{}", r.task, opt(r.auc), r.accuracy, r.sensitivity, r.specificity, r.f1);
        }
        let d = MaskingReport { rows: report.masking_deltas.clone() }.to_csv();
        let (pm, pd) = (cfg.out(artifact::REPORT_METRICS), cfg.out(artifact::REPORT_MASKING));
        write(&pm, m.as_bytes())?;
        write(&pd, d.as_bytes())?;
        out.extend([pm, pd]);
    }
    Ok(out)
}
