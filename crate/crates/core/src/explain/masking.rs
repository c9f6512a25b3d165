use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ExplainError;
use crate::imaging::{BinaryMask, NormStats, RasterImage};
use crate::metrics::{roc_auc, scored_samples};
use crate::model::{ModelError, MultiTaskNet};
use crate::training::predict_dataset;
use crate::vesselseg::{estimate_fov, morph, MorphOp};
use crate::{Scalar, Task, TaskLabels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Vessel,
    Macula,
    OpticDisc,
    Background,
    /// Masks nothing; its delta must be zero.
    Empty,
}

impl Region {
    pub const ANATOMICAL: [Region; 4] = [Region::Vessel, Region::Macula, Region::OpticDisc, Region::Background];
    pub const ALL: [Region; 5] = [Region::Vessel, Region::Macula, Region::OpticDisc, Region::Background, Region::Empty];

    pub fn name(self) -> &'static str {
        match self {
            Region::Vessel => "vessel",
            Region::Macula => "macula",
            Region::OpticDisc => "optic_disc",
            Region::Background => "background",
            Region::Empty => "empty",
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    GroundTruth,
    Estimated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Per-channel mean of the image's field-of-view pixels.
    #[default]
    FovMean,
    Constant([u8; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSpec {
    pub region: Region,
    pub mask: BinaryMask,
    pub source: RegionSource,
    pub fill: FillPolicy,
}

/// Dilation applied to vessel regions before filling.
pub const VESSEL_DILATION_PX: usize = 2;

/// Per-channel mean of the pixels inside the estimated field of view (all
/// pixels when none is found).
pub fn fov_mean(img: &RasterImage) -> [u8; 3] {
    let fov = estimate_fov(img, 0.0).map(|f| f.mask(img.width(), img.height()));
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        if fov.as_ref().is_none_or(|m| m.is_set(i)) {
            for c in 0..3 {
                sum[c] += px[c] as u64;
            }
            n += 1;
        }
    }
    if n == 0 {
        return [0; 3];
    }
    sum.map(|s| (s as f64 / n as f64).round() as u8)
}

/// Replaces masked pixels with `fill`.
pub fn mask_region_with_fill(img: &RasterImage, mask: &BinaryMask, fill: [u8; 3]) -> Result<RasterImage, ExplainError> {
    if (mask.width, mask.height) != (img.width(), img.height()) {
        return Err(ExplainError::DimMismatch { expected: (img.width(), img.height()), actual: (mask.width, mask.height) });
    }
    let mut out = img.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if mask.is_set(i) {
            px.copy_from_slice(&fill);
        }
    }
    Ok(out)
}

/// The mask actually filled for a region: vessels are dilated first.
pub fn effective_mask(spec: &RegionSpec) -> BinaryMask {
    if spec.region == Region::Vessel && !spec.mask.is_empty() {
        let d = morph(&spec.mask.to_gray(), MorphOp::Dilate, VESSEL_DILATION_PX);
        BinaryMask::from_nonzero(d.width, d.height, &d.data).expect("same dimensions")
    } else {
        spec.mask.clone()
    }
}

/// Applies the masking operator of `spec` to `img`.
pub fn mask_region(img: &RasterImage, spec: &RegionSpec) -> Result<RasterImage, ExplainError> {
    let fill = match spec.fill {
        FillPolicy::FovMean => fov_mean(img),
        FillPolicy::Constant(c) => c,
    };
    mask_region_with_fill(img, &effective_mask(spec), fill)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingRow {
    pub task: Task,
    pub region: Region,
    pub auc_baseline: Option<f64>,
    pub auc_masked: Option<f64>,
    /// `auc_baseline - auc_masked`.
    pub delta: Option<f64>,
    /// Labeled images evaluated.
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskingReport {
    pub rows: Vec<MaskingRow>,
}

pub const MASKING_HEADER: &str = "task,region,auc_baseline,auc_masked,delta,n";

impl MaskingReport {
    pub fn get(&self, task: Task, region: Region) -> Option<&MaskingRow> {
        self.rows.iter().find(|r| r.task == task && r.region == region)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{MASKING_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.task, r.region, opt(r.auc_baseline), opt(r.auc_masked), opt(r.delta), r.n);
        }
        out
    }

    /// Inverse of [`MaskingReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, ExplainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MASKING_HEADER) {
            return Err(ExplainError::Format(format!("expected header `{MASKING_HEADER}`")));
        }
        let bad = |line: &str| ExplainError::Format(format!("malformed masking row `{line}`"));
        let num = |f: &str, line: &str| -> Result<Option<f64>, ExplainError> {
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| bad(line))
            }
        };
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let region = Region::ALL.into_iter().find(|r| r.name() == f[1]).ok_or_else(|| bad(line))?;
            rows.push(MaskingRow {
                task: f[0].parse().map_err(|_| bad(line))?,
                region,
                auc_baseline: num(f[2], line)?,
                auc_masked: num(f[3], line)?,
                delta: num(f[4], line)?,
                n: f[5].parse().map_err(|_| bad(line))?,
            });
        }
        Ok(MaskingReport { rows })
    }
}

fn aucs<T: Scalar>(probs: &[Vec<T>], labels: &[TaskLabels], task: Task) -> (Option<f64>, usize) {
    let scores: Vec<T> = probs.iter().map(|p| p[task.index()]).collect();
    let y: Vec<Option<bool>> = labels.iter().map(|l| l.get(task)).collect();
    let samples = scored_samples(&scores, &y);
    (roc_auc(&samples).ok().map(|a| a.value()), samples.len())
}

/// Baseline and per-region masked AUC for each task. `regions[i]` holds the
/// region specs of image `i`; every listed region must be present for every
/// image.
#[allow(clippy::too_many_arguments)]
pub fn masking_experiment<T: Scalar>(
    net: &MultiTaskNet<T>,
    images: &[RasterImage],
    labels: &[TaskLabels],
    regions: &[BTreeMap<Region, RegionSpec>],
    region_order: &[Region],
    tasks: &[Task],
    norm: &NormStats,
    batch: usize,
) -> Result<MaskingReport, ExplainError> {
    if images.is_empty() {
        return Err(ExplainError::EmptyEvaluationSet);
    }
    if labels.len() != images.len() || regions.len() != images.len() {
        return Err(ExplainError::Model(ModelError::StaleCache("images, labels and regions differ in length".into())));
    }
    let base = predict_dataset(net, images, norm, batch)?;
    let mut report = MaskingReport::default();
    let mut masked_probs = BTreeMap::new();
    for &region in region_order {
        let masked = images
            .iter()
            .zip(regions)
            .enumerate()
            .map(|(i, (img, specs))| {
                let spec = specs.get(&region).ok_or(ExplainError::MissingRegion { image: i, region })?;
                mask_region(img, spec)
            })
            .collect::<Result<Vec<_>, _>>()?;
        masked_probs.insert(region, predict_dataset(net, &masked, norm, batch)?);
    }
    for &task in tasks {
        let (baseline, n) = aucs(&base, labels, task);
        for &region in region_order {
            let (masked, _) = aucs(&masked_probs[&region], labels, task);
            let delta = baseline.zip(masked).map(|(b, m)| b - m);
            report.rows.push(MaskingRow { task, region, auc_baseline: baseline, auc_masked: masked, delta, n });
        }
    }
    Ok(report)
}
