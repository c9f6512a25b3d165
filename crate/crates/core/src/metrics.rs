//! Ranking, thresholded and calibration metrics for binary tasks.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Scalar, Task};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no samples")]
    Empty,
    #[error("AUC undefined: only one class present")]
    SingleClass,
    #[error("score at index {0} is not a finite value in [0, 1]")]
    InvalidScore(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample<T> {
    pub score: T,
    pub label: bool,
}

impl<T> ScoredSample<T> {
    pub fn new(score: T, label: bool) -> Self {
        ScoredSample { score, label }
    }
}

/// Pairs up scores with present labels, dropping missing ones.
pub fn scored_samples<T: Scalar>(scores: &[T], labels: &[Option<bool>]) -> Vec<ScoredSample<T>> {
    scores
        .iter()
        .zip(labels)
        .filter_map(|(&score, l)| l.map(|label| ScoredSample { score, label }))
        .collect()
}

/// AUC kept as an exact ratio `twice_u / (2 n_pos n_neg)`, where `twice_u`
/// counts each correctly ordered pair twice and each tie once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Auc {
    pub twice_u: u64,
    pub n_pos: u64,
    pub n_neg: u64,
}

impl Auc {
    pub fn denominator(&self) -> u64 {
        2 * self.n_pos * self.n_neg
    }

    pub fn value(&self) -> f64 {
        self.twice_u as f64 / self.denominator() as f64
    }
}

fn check_scores<T: Scalar>(samples: &[ScoredSample<T>], unit_interval: bool) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, s) in samples.iter().enumerate() {
        let ok = s.score.is_finite() && (!unit_interval || (s.score >= T::zero() && s.score <= T::one()));
        if !ok {
            return Err(MetricsError::InvalidScore(i));
        }
    }
    Ok(())
}

/// Mann-Whitney AUC with ties counted as one half.
///
/// Scores only need to be finite; any strictly increasing transform gives
/// the same result.
pub fn roc_auc<T: Scalar>(samples: &[ScoredSample<T>]) -> Result<Auc, MetricsError> {
    check_scores(samples, false)?;
    let n_pos = samples.iter().filter(|s| s.label).count() as u64;
    let n_neg = samples.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut sorted: Vec<&ScoredSample<T>> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal));
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].label {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(Auc { twice_u, n_pos, n_neg })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// A ratio that may have a zero denominator; undefined values read as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub defined: bool,
}

impl Ratio {
    fn of(num: u64, den: u64) -> Self {
        if den == 0 {
            Ratio { value: 0.0, defined: false }
        } else {
            Ratio { value: num as f64 / den as f64, defined: true }
        }
    }
}

impl Confusion {
    pub fn from_samples<T: Scalar>(samples: &[ScoredSample<T>], threshold: T) -> Self {
        let mut c = Confusion::default();
        for s in samples {
            match (s.score >= threshold, s.label) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Ratio {
        Ratio::of(self.tp + self.tn, self.n())
    }

    pub fn sensitivity(&self) -> Ratio {
        Ratio::of(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Ratio {
        Ratio::of(self.tn, self.tn + self.fp)
    }

    pub fn f1(&self) -> Ratio {
        Ratio::of(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub accuracy: Ratio,
    pub sensitivity: Ratio,
    pub specificity: Ratio,
    pub f1: Ratio,
    pub n: u64,
    pub n_positive: u64,
    pub ece: f64,
}

/// Thresholded metrics (predict positive iff `score >= threshold`).
pub fn confusion_metrics<T: Scalar>(samples: &[ScoredSample<T>], threshold: T) -> Result<Confusion, MetricsError> {
    check_scores(samples, false)?;
    Ok(Confusion::from_samples(samples, threshold))
}

/// Everything reported for one task at the default threshold.
pub fn task_metrics<T: Scalar>(task: Task, samples: &[ScoredSample<T>]) -> Result<TaskMetrics, MetricsError> {
    let c = confusion_metrics(samples, T::lit(DEFAULT_THRESHOLD))?;
    let auc = match roc_auc(samples) {
        Ok(a) => Some(a.value()),
        Err(MetricsError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    let bins = reliability_bins(samples)?;
    Ok(TaskMetrics {
        task,
        auc,
        accuracy: c.accuracy(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        f1: c.f1(),
        n: c.n(),
        n_positive: c.tp + c.fn_,
        ece: bins.ece,
    })
}

pub const CALIBRATION_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
    /// `None` for empty bins.
    pub mean_pred: Option<f64>,
    pub obs_frac: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub bins: Vec<CalibrationBin>,
    pub n: u64,
    pub ece: f64,
}

/// Ten equal-width bins on `[0, 1]`; bin k is `[k/10, (k+1)/10)` and the
/// last bin also takes 1.0.
pub fn reliability_bins<T: Scalar>(samples: &[ScoredSample<T>]) -> Result<CalibrationBins, MetricsError> {
    check_scores(samples, true)?;
    let edges: Vec<f64> = (0..=CALIBRATION_BINS).map(|k| k as f64 / CALIBRATION_BINS as f64).collect();
    let mut count = [0u64; CALIBRATION_BINS];
    let mut sum = [0.0f64; CALIBRATION_BINS];
    let mut pos = [0u64; CALIBRATION_BINS];
    for s in samples {
        let v = s.score.as_f64();
        let k = edges[1..CALIBRATION_BINS].iter().take_while(|&&e| v >= e).count();
        count[k] += 1;
        sum[k] += v;
        pos[k] += s.label as u64;
    }
    let n = samples.len() as u64;
    let mut ece = 0.0;
    let bins = (0..CALIBRATION_BINS)
        .map(|k| {
            let (mean_pred, obs_frac) = if count[k] == 0 {
                (None, None)
            } else {
                let m = sum[k] / count[k] as f64;
                let o = pos[k] as f64 / count[k] as f64;
                ece += count[k] as f64 / n as f64 * (m - o).abs();
                (Some(m), Some(o))
            };
            CalibrationBin { low: edges[k], high: edges[k + 1], count: count[k], mean_pred, obs_frac }
        })
        .collect();
    Ok(CalibrationBins { bins, n, ece })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str =
    "task,auc,accuracy,sensitivity,specificity,f1,n,n_positive,ece,auc_defined,sensitivity_defined,specificity_defined,f1_defined";

pub fn metrics_csv(rows: &[TaskMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.task,
            opt(m.auc),
            m.accuracy.value,
            m.sensitivity.value,
            m.specificity.value,
            m.f1.value,
            m.n,
            m.n_positive,
            m.ece,
            m.auc.is_some(),
            m.sensitivity.defined,
            m.specificity.defined,
            m.f1.defined
        );
    }
    out
}

pub const CALIBRATION_HEADER: &str = "bin_low,bin_high,count,mean_pred,obs_frac";
pub const CALIBRATION_TABLE_HEADER: &str = "task,bin_low,bin_high,count,mean_pred,obs_frac";

pub fn calibration_csv(bins: &CalibrationBins) -> String {
    let mut out = format!("{CALIBRATION_HEADER}\n");
    for b in &bins.bins {
        let _ = writeln!(out, "{},{},{},{},{}", b.low, b.high, b.count, opt(b.mean_pred), opt(b.obs_frac));
    }
    out
}

/// Bins of several tasks in one table, prefixed by a task column.
pub fn calibration_table_csv(tasks: &[(Task, CalibrationBins)]) -> String {
    let mut out = format!("{CALIBRATION_TABLE_HEADER}\n");
    for (task, bins) in tasks {
        for line in calibration_csv(bins).lines().skip(1) {
            let _ = writeln!(out, "{task},{line}");
        }
    }
    out
}
