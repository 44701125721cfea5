//! The `segkit` binary driven end to end on small phantom datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segkit::dataset::{read_raw, write_nifti, write_raw};
use segkit::unet::{save_checkpoint, Checkpoint, ModelConfig};
use segkit::volume::Volume3D;
use segkit::Tensor;

const TINY: &str = r#"{
  "dataset_root": "data",
  "output_dir": "out",
  "target_size": [16, 16, 16],
  "train_fraction": 0.5,
  "model": {"depth": 2, "base_channels": 4, "in_channels": 4, "num_classes": 4, "gate": true, "seed": 0},
  "plan": {"rounds": [{"epochs": 3, "batch_size": 2}, {"epochs": 3, "batch_size": 1}], "lr": 0.001, "seed": 0}
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", "config.json"];
        full.extend_from_slice(args);
        Command::new(env!("CARGO_BIN_EXE_segkit"))
            .args(&full)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "segkit {args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn phantoms(&self, count: usize, dims: usize) {
        let d = dims.to_string();
        self.ok(&[
            "phantom",
            "--count",
            &count.to_string(),
            "--dims",
            &d,
            &d,
            &d,
            "--radius",
            "8",
        ]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn preprocess_writes_tensor_pairs_at_target_size() {
    let ws = Workspace::new(&TINY.replace("[16, 16, 16]", "[128, 128, 128]"));
    ws.phantoms(2, 64);
    ws.ok(&["preprocess"]);
    for id in ["phantom_000", "phantom_001"] {
        let image = read_raw(ws.path(&format!("out/preprocessed/{id}_image.vol"))).unwrap();
        let mask = read_raw(ws.path(&format!("out/preprocessed/{id}_mask.vol"))).unwrap();
        assert_eq!(image.shape(), &[4, 128, 128, 128]);
        assert_eq!(mask.shape(), &[1, 128, 128, 128]);
        assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(mask
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0));
        assert!(mask.data().iter().any(|&v| v != 0.0));
    }
    let detections: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(ws.path("out/preprocessed/detections.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(detections.as_array().unwrap().len(), 2);
}

#[test]
fn preprocess_rerun_is_bit_identical() {
    let ws = Workspace::new(TINY);
    ws.phantoms(2, 32);
    ws.ok(&["preprocess"]);
    let first = fs::read(ws.path("out/preprocessed/phantom_001_image.vol")).unwrap();
    let index = fs::read(ws.path("out/preprocessed/index.json")).unwrap();
    ws.ok(&["preprocess"]);
    assert_eq!(
        fs::read(ws.path("out/preprocessed/phantom_001_image.vol")).unwrap(),
        first
    );
    assert_eq!(
        fs::read(ws.path("out/preprocessed/index.json")).unwrap(),
        index
    );
}

#[test]
fn missing_modality_is_reported_and_others_continue() {
    let ws = Workspace::new(TINY);
    ws.phantoms(3, 32);
    fs::remove_file(ws.path("data/phantom_001/phantom_001_t2.nii")).unwrap();
    ws.ok(&["preprocess"]);
    let failures: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(ws.path("out/preprocessed/failures.json")).unwrap(),
    )
    .unwrap();
    let failed = failures["failed"].as_array().unwrap();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0]["case"], "phantom_001");
    assert!(ws.path("out/preprocessed/phantom_000_image.vol").exists());
    assert!(!ws.path("out/preprocessed/phantom_001_image.vol").exists());
}

#[test]
fn all_cases_failing_is_a_data_error() {
    let ws = Workspace::new(TINY);
    ws.phantoms(2, 32);
    for id in ["phantom_000", "phantom_001"] {
        fs::write(
            ws.path(&format!("data/{id}/{id}_flair.nii")),
            b"not a nifti",
        )
        .unwrap();
    }
    assert_eq!(code(&ws.run(&["preprocess"])), 2);
}

#[test]
fn train_writes_history_and_round_checkpoints() {
    let ws = Workspace::new(TINY);
    ws.phantoms(4, 32);
    ws.ok(&["preprocess"]);
    ws.ok(&["train"]);
    let history = fs::read_to_string(ws.path("out/history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,loss,dice,iou,accuracy,sensitivity,specificity"
    );
    assert_eq!(lines.count(), 6);
    for f in [
        "out/checkpoints/round-01.aunc",
        "out/checkpoints/round-02.aunc",
        "out/model.aunc",
    ] {
        assert!(ws.path(f).exists(), "{f}");
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let ws = Workspace::new(TINY);
    ws.phantoms(4, 32);
    ws.ok(&["preprocess"]);
    ws.ok(&["train"]);
    let history = fs::read(ws.path("out/history.csv")).unwrap();
    let model = fs::read(ws.path("out/model.aunc")).unwrap();

    // simulate a run that stopped right after the first round
    for f in [
        "out/checkpoints/round-02.aunc",
        "out/model.aunc",
        "out/history.csv",
    ] {
        fs::remove_file(ws.path(f)).unwrap();
    }
    ws.ok(&["train", "--resume"]);
    assert_eq!(fs::read(ws.path("out/history.csv")).unwrap(), history);
    assert_eq!(fs::read(ws.path("out/model.aunc")).unwrap(), model);
}

#[test]
fn resume_without_checkpoint_is_a_usage_error() {
    let ws = Workspace::new(TINY);
    ws.phantoms(2, 32);
    ws.ok(&["preprocess"]);
    assert_eq!(code(&ws.run(&["train", "--resume"])), 1);
}

#[test]
fn train_before_preprocess_is_a_usage_error() {
    let ws = Workspace::new(TINY);
    assert_eq!(code(&ws.run(&["train"])), 1);
}

#[test]
fn evaluate_writes_csv_and_json_and_report_renders() {
    let ws = Workspace::new(TINY);
    ws.phantoms(2, 32);
    ws.ok(&["preprocess"]);
    ws.ok(&["train"]);
    ws.ok(&["evaluate", "--split", "all"]);
    let csv = fs::read_to_string(ws.path("out/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case,region,tp,fp,fn,tn,accuracy,dice,iou,sensitivity,specificity"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // two cases and two aggregates, four region rows each
    assert_eq!(rows.len(), 16);
    assert!(rows.iter().all(|r| r.len() == 11));
    let cases: Vec<&str> = rows.iter().step_by(4).map(|r| r[0]).collect();
    assert_eq!(cases, ["phantom_000", "phantom_001", "macro", "pooled"]);
    assert_eq!(
        rows[..4].iter().map(|r| r[1]).collect::<Vec<_>>(),
        ["WT", "TC", "ET", "MEAN"]
    );

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["cases"].as_array().unwrap().len(), 2);
    assert!(json["undefined"].is_array());

    let out = ws.ok(&["report"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Mean over cases") && text.contains("Pooled voxel counts"));
    assert_eq!(fs::read_to_string(ws.path("out/report.md")).unwrap(), text);
}

#[test]
fn empty_validation_split_is_a_usage_error() {
    let ws = Workspace::new(&TINY.replace("\"train_fraction\": 0.5", "\"train_fraction\": 0.9"));
    ws.phantoms(2, 32);
    ws.ok(&["preprocess"]);
    ws.ok(&["train"]);
    assert_eq!(code(&ws.run(&["evaluate", "--split", "val"])), 1);
}

#[test]
fn checkpoint_that_does_not_fit_the_data_is_a_data_error() {
    // 18 is divisible by 2 (depth 2) but not by 4 (depth 3)
    let ws = Workspace::new(&TINY.replace("[16, 16, 16]", "[18, 18, 18]"));
    ws.phantoms(2, 32);
    ws.ok(&["preprocess"]);
    let deep = Checkpoint::initial(ModelConfig {
        depth: 3,
        base_channels: 2,
        ..ModelConfig::toy(1)
    })
    .unwrap();
    save_checkpoint(&deep, ws.path("deep.aunc")).unwrap();
    assert_eq!(
        code(&ws.run(&["evaluate", "--split", "all", "--checkpoint", "deep.aunc"])),
        2
    );
}

fn pgm_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

#[test]
fn export_writes_one_pgm_per_slice() {
    let ws = Workspace::new(TINY);
    let v = Volume3D::from_fn([155, 6, 5], |z, y, x| (z + y + x) as f32);
    write_nifti(&v, ws.path("scan.nii")).unwrap();
    ws.ok(&["export-slices", "scan.nii", "--out", "axial"]);
    let files = pgm_files(&ws.path("axial"));
    assert_eq!(files.len(), 155);
    let first = fs::read(&files[0]).unwrap();
    assert_eq!(&first[..11], b"P5\n5 6\n255\n");
    assert_eq!(first.len(), 11 + 30);

    ws.ok(&[
        "export-slices",
        "scan.nii",
        "--axis",
        "sagittal",
        "--out",
        "sag",
    ]);
    let files = pgm_files(&ws.path("sag"));
    assert_eq!(files.len(), 5);
    assert_eq!(&fs::read(&files[0]).unwrap()[..13], b"P5\n6 155\n255\n");
}

#[test]
fn export_of_constant_volume_is_all_zero() {
    let ws = Workspace::new(TINY);
    write_raw(&Tensor::full(vec![2, 3, 4, 4], 0.7f32), ws.path("flat.vol")).unwrap();
    ws.ok(&[
        "export-slices",
        "flat.vol",
        "--channel",
        "1",
        "--out",
        "flat",
    ]);
    let files = pgm_files(&ws.path("flat"));
    assert_eq!(files.len(), 3);
    for f in files {
        let bytes = fs::read(f).unwrap();
        assert!(bytes[11..].iter().all(|&b| b == 0));
    }
    assert_eq!(
        code(&ws.run(&["export-slices", "flat.vol", "--channel", "2"])),
        1
    );
    assert_eq!(code(&ws.run(&["export-slices", "missing.vol"])), 2);
}

#[test]
fn config_init_and_overrides() {
    let ws = Workspace::new(TINY);
    ws.ok(&["config", "init", "full.json"]);
    let full: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("full.json")).unwrap()).unwrap();
    for key in [
        "dataset_root",
        "output_dir",
        "detect",
        "target_size",
        "model",
        "plan",
        "seed",
        "threads",
    ] {
        assert!(full.get(key).is_some(), "{key}");
    }
    assert_eq!(code(&ws.run(&["config", "init", "full.json"])), 1);
    ws.ok(&["config", "init", "full.json", "--force"]);

    let out = ws.ok(&[
        "--seed",
        "77",
        "--threads",
        "3",
        "--output",
        "elsewhere",
        "config",
        "show",
    ]);
    let shown: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(shown["seed"], 77);
    assert_eq!(shown["model"]["seed"], 77);
    assert_eq!(shown["plan"]["seed"], 77);
    assert_eq!(shown["threads"], 3);
    assert_eq!(shown["output_dir"], "elsewhere");
}

#[test]
fn bad_usage_and_bad_config_exit_with_one() {
    let ws = Workspace::new(r#"{"target_size": [100, 128, 128]}"#);
    assert_eq!(code(&ws.run(&["config", "show"])), 1);
    let ws = Workspace::new("{ not json");
    assert_eq!(code(&ws.run(&["config", "show"])), 1);
    let ws = Workspace::new(TINY);
    assert_eq!(code(&ws.run(&["no-such-command"])), 1);
    assert_eq!(code(&ws.run(&["--threads", "0", "config", "show"])), 1);
    assert_eq!(code(&ws.run(&["--help"])), 0);
}
