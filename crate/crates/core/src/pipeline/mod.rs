//! End-to-end run: configuration, artifact layout and the eight stages.

mod report;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use report::{write_report, DatasetSummary, IouSummary, Report, SplitSummary, TaskIouSummary, TestMetricsRow};
pub use stages::{load_images, load_records, load_split};

use crate::explain::RegionSource;
use crate::imaging::QcConfig;
use crate::model::NetConfig;
use crate::synthgen::{CohortSpec, PhantomSpec};
use crate::training::TrainConfig;
use crate::vesselseg::SegParams;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: String, stage: Stage },
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        PipelineError::Runtime(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Split,
    Train,
    Eval,
    Explain,
    XaiIou,
    MaskExp,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Split,
        Stage::Train,
        Stage::Eval,
        Stage::Explain,
        Stage::XaiIou,
        Stage::MaskExp,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
            Stage::XaiIou => "xai-iou",
            Stage::MaskExp => "mask-exp",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// File names inside the output directory.
pub mod artifact {
    pub const SPLIT: &str = "split.csv";
    pub const MODEL: &str = "model.json";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const CONTROL_MODEL: &str = "control_model.json";
    pub const CONTROL_TRAIN_LOG: &str = "control_train_log.csv";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const METRICS: &str = "metrics.csv";
    pub const CALIBRATION: &str = "calibration.csv";
    pub const EVAL_JSON: &str = "eval.json";
    pub const ATTENTION_DIR: &str = "attention";
    pub const OVERLAY_DIR: &str = "overlays";
    pub const IOU: &str = "iou.csv";
    pub const IOU_SUMMARY: &str = "iou_summary.json";
    pub const MASKING: &str = "masking.csv";
    pub const REPORT: &str = "report.json";
    pub const REPORT_METRICS: &str = "report_test_metrics.csv";
    pub const REPORT_MASKING: &str = "report_masking_deltas.csv";
    pub const RUN_MANIFEST: &str = "run_manifest.json";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/cohort`.
    pub cohort_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out_dir: PathBuf::from("runs/desk"), cohort_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { fractions: [0.70, 0.15, 0.15], seed: 42 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub attention_threshold: f32,
    pub region_source: RegionSource,
    /// Test images rendered as attention maps and overlays.
    pub overlay_images: usize,
    /// Test images used for attention/vessel IoU; 0 means all.
    pub iou_images: usize,
    /// Also train a label-shuffled copy as the IoU baseline.
    pub shuffled_control: bool,
    pub control_seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            attention_threshold: crate::explain::ATTENTION_THRESHOLD,
            region_source: RegionSource::GroundTruth,
            overlay_images: 8,
            iou_images: 0,
            shuffled_control: true,
            control_seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Everything a run depends on. The default is the desk configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub cohort: CohortSpec,
    pub split: SplitConfig,
    pub net: NetConfig,
    /// Seed of the network's initial weights and dropout stream.
    pub model_seed: u64,
    pub train: TrainConfig,
    pub qc: QcConfig,
    pub seg: SegParams,
    pub explain: ExplainConfig,
    pub report_formats: Vec<ReportFormat>,
}

/// Desk image side.
pub const DESK_IMAGE_SIZE: usize = 96;
/// Desk epoch budget; the cosine period matches it.
pub const DESK_EPOCHS: usize = 15;
/// Desk learning rate.
pub const DESK_LR: f64 = 1e-3;

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.optim.lr = DESK_LR;
        train.optim.max_epochs = DESK_EPOCHS;
        train.optim.t_max = DESK_EPOCHS;
        PipelineConfig {
            paths: Paths::default(),
            cohort: CohortSpec {
                phantom: PhantomSpec { image_size: DESK_IMAGE_SIZE, ..PhantomSpec::default() },
                ..CohortSpec::default()
            },
            split: SplitConfig::default(),
            net: NetConfig::with_input(DESK_IMAGE_SIZE),
            model_seed: 42,
            train,
            qc: QcConfig::default(),
            seg: SegParams::default(),
            explain: ExplainConfig::default(),
            report_formats: vec![ReportFormat::Json, ReportFormat::Csv],
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces every seed with `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.cohort.seed = seed;
        self.split.seed = seed;
        self.model_seed = seed;
        self.train.optim.seed = seed;
        self.train.augment.rng_seed = seed;
        self.explain.control_seed = seed;
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.cohort.validate().map_err(|e| cfg(&e))?;
        self.net.validate().map_err(|e| cfg(&e))?;
        self.train.loss.validate().map_err(|e| cfg(&e))?;
        self.train.optim.validate().map_err(|e| cfg(&e))?;
        self.train.augment.validate().map_err(|e| cfg(&e))?;
        self.train.norm.validate().map_err(|e| cfg(&e))?;
        self.seg.validate().map_err(|e| cfg(&e))?;
        let f = self.split.fractions;
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!("split fractions {f:?} must be positive and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.explain.attention_threshold) {
            return Err(PipelineError::Config("attention_threshold must lie in [0, 1]".into()));
        }
        if self.train.eval_batch == 0 {
            return Err(PipelineError::Config("eval_batch must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.paths.cohort_dir.clone().unwrap_or_else(|| self.paths.out_dir.join("cohort"))
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.paths.out_dir.join(rel)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifacts: Vec<String>,
    pub wall_time_s: f64,
}

/// Record of what each stage produced. Rewritten after every stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: Option<PipelineConfig>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Option<Self> {
        serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
    }
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io { path: parent.display().to_string(), source })?;
    }
    fs::write(path, bytes).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

pub(crate) fn read_string(path: &Path, producer: Stage) -> Result<String, PipelineError> {
    require(path, producer)?;
    fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.display().to_string(), source })
}

pub(crate) fn require(path: &Path, producer: Stage) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact { path: path.display().to_string(), stage: producer })
    }
}

/// Runs one stage and records its artifacts in the run manifest.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    cfg.validate()?;
    let start = Instant::now();
    let artifacts = match stage {
        Stage::Synth => stages::synth(cfg)?,
        Stage::Split => stages::split(cfg)?,
        Stage::Train => stages::train(cfg)?,
        Stage::Eval => stages::eval(cfg)?,
        Stage::Explain => stages::explain(cfg)?,
        Stage::XaiIou => stages::xai_iou(cfg)?,
        Stage::MaskExp => stages::mask_exp(cfg)?,
        Stage::Report => report::write_report(cfg)?,
    };
    let path = cfg.out(artifact::RUN_MANIFEST);
    let mut manifest = RunManifest::load(&path).unwrap_or_default();
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.config = Some(cfg.clone());
    manifest.stages.insert(
        stage.name().to_string(),
        StageRecord {
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    );
    write(&path, serde_json::to_string_pretty(&manifest).map_err(PipelineError::runtime)?.as_bytes())?;
    Ok(artifacts)
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    for stage in Stage::ALL {
        log::info!("stage {stage}");
        run_stage(stage, cfg)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_are_config_errors() {
        let e = PipelineConfig::from_json(r#"{"split": {"fractions": [0.5, 0.5, 0.5]}}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = PipelineConfig::from_json(r#"{"no_such_field": 1}"#).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_seed(9);
        assert_eq!(
            [cfg.cohort.seed, cfg.split.seed, cfg.model_seed, cfg.train.optim.seed, cfg.train.augment.rng_seed, cfg.explain.control_seed],
            [9; 6]
        );
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("deploy".parse::<Stage>().is_err());
    }
}
