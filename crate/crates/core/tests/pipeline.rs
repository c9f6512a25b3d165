use std::fs;
use std::path::Path;

use retina_xai::cohort::parse_manifest;
use retina_xai::pipeline::{artifact, run_stage, PipelineConfig, PipelineError, Report, RunManifest, Stage};
use retina_xai::synthgen::CohortFiles;
use retina_xai::Task;

/// A cohort and network small enough to run every stage in seconds.
fn tiny_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.out_dir = out.to_path_buf();
    cfg.cohort.n_subjects = 40;
    cfg.cohort.images_per_subject = 2;
    cfg.cohort.phantom.image_size = 48;
    cfg.net = retina_xai::model::NetConfig::with_input(48);
    cfg.train.optim.max_epochs = 2;
    cfg.train.optim.t_max = 2;
    cfg.train.optim.batch_size = 16;
    cfg.explain.overlay_images = 2;
    cfg
}

fn run_all(cfg: &PipelineConfig) {
    for stage in Stage::ALL {
        run_stage(stage, cfg).unwrap_or_else(|e| panic!("{stage}: {e}"));
    }
}

#[test]
fn tiny_run_is_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = tiny_config(&a);
    run_all(&cfg);
    run_all(&tiny_config(&b));
    for f in [artifact::SPLIT, artifact::TRAIN_LOG, artifact::METRICS, artifact::CALIBRATION, artifact::MASKING, artifact::IOU, artifact::REPORT] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    // every listed artifact exists and the echoed config parses back
    let manifest = RunManifest::load(&a.join(artifact::RUN_MANIFEST)).unwrap();
    assert_eq!(manifest.stages.len(), 8);
    for rec in manifest.stages.values() {
        for p in &rec.artifacts {
            assert!(Path::new(p).exists(), "{p}");
        }
    }
    let echoed = manifest.config.unwrap();
    assert_eq!(PipelineConfig::from_json(&echoed.to_json()).unwrap(), cfg);

    let report: Report = serde_json::from_str(&fs::read_to_string(a.join(artifact::REPORT)).unwrap()).unwrap();
    assert_eq!(report.test_metrics.len(), 3);
    assert_eq!(report.masking_deltas.len(), 12);
    let header = fs::read_to_string(a.join(artifact::REPORT_METRICS)).unwrap();
    assert_eq!(header.lines().next().unwrap(), "task,auc,accuracy,sensitivity,specificity,f1");

    // prevalences are a recount of the manifest
    let records = parse_manifest(&fs::read_to_string(a.join("cohort").join(CohortFiles::MANIFEST)).unwrap()).unwrap();
    for task in Task::ALL {
        let pos = records.iter().filter(|r| r.labels.get(task) == Some(true)).count();
        let lab = records.iter().filter(|r| r.labels.get(task).is_some()).count();
        assert_eq!(report.dataset_summary.all.prevalence[task.index()], Some(pos as f64 / lab as f64));
    }
    let split_total: usize = report.dataset_summary.splits.values().map(|s| s.images).sum();
    assert_eq!(split_total, records.len());

    // empty-region control never moves the AUC
    let masking = retina_xai::explain::MaskingReport::from_csv(&fs::read_to_string(a.join(artifact::MASKING)).unwrap()).unwrap();
    for row in masking.rows.iter().filter(|r| r.region == retina_xai::explain::Region::Empty) {
        assert!(row.delta.is_none_or(|d| d == 0.0));
    }

    let overlays = fs::read_dir(a.join(artifact::OVERLAY_DIR)).unwrap().count();
    assert_eq!(overlays, 2 * 3);
}

#[test]
fn downstream_stage_without_upstream_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    run_stage(Stage::Synth, &cfg).unwrap();
    run_stage(Stage::Split, &cfg).unwrap();
    let err = run_stage(Stage::Eval, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    match err {
        PipelineError::MissingArtifact { path, stage } => {
            assert!(path.ends_with(artifact::MODEL));
            assert_eq!(stage, Stage::Train);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn bundled_desk_config_is_the_default() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    assert_eq!(PipelineConfig::load(&p).unwrap(), PipelineConfig::default());
}
