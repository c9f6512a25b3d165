use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retina-xai"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

const TINY: &str = r#"{
  "cohort": {"n_subjects": 20, "images_per_subject": 2, "phantom": {"image_size": 48}},
  "net": {"input_height": 48, "input_width": 48},
  "train": {"optim": {"max_epochs": 1, "t_max": 1, "batch_size": 16}},
  "explain": {"shuffled_control": false}
}"#;

#[test]
fn eval_before_train_exits_3_naming_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    for stage in ["synth", "split"] {
        let s = bin().args([stage, "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(s.success(), "{stage}");
    }
    let o = bin().args(["eval", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.json"));
}

#[test]
fn synth_split_train_produce_declared_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    for stage in ["synth", "split", "train"] {
        let s = bin().args([stage, "--config"]).arg(&cfg).arg("--out").arg(&out).args(["--threads", "1"]).status().unwrap();
        assert!(s.success(), "{stage}");
    }
    for f in ["cohort/manifest.csv", "split.csv", "model.json", "train_log.csv", "run_manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), r#"{"split": {"fractions": [0.9, 0.2, 0.1]}}"#);
    let o = bin().args(["synth", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["synth", "--config"]).arg(tmp.path().join("absent.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["launch", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
