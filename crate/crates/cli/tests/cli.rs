use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusionseg_cli::{RunConfig, LOCK_FILE};
use fusionseg_core::volume::{load_manifest, nifti_read, nifti_write};

fn fusionseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three 32×32×16 studies at 1 mm and a two-stage UNet trained for a few steps.
const TINY: &str = r#"{
  "phantom": {
    "n_studies": 3, "val_fraction": 0.0, "test_fraction": 0.34,
    "trus_dims": [32, 32, 16], "trus_spacing": [1.0, 1.0, 1.0],
    "mri_dims": [32, 32, 4], "mri_spacing": [1.0, 1.0, 4.0],
    "gland_axes_mm": [[10.0, 12.0], [9.0, 11.0], [6.0, 7.0]],
    "lesions_per_study": [1, 2], "lesion_radius_mm": [3.0, 4.5]
  },
  "preprocess": { "mri_spacing": [1.0, 1.0, 4.0], "trus_spacing": [1.0, 1.0, 1.0], "crop_extent_mm": [32.0, 32.0] },
  "unet": { "stages": 2, "base_channels": 4 },
  "train": { "patch_size": [16, 16, 8], "steps_per_epoch": 3 },
  "inference": { "patch_size": [16, 16, 8] },
  "evaluation": { "bootstrap_resamples": 100 }
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn phantom(root: &Path, cfg: &Path) -> PathBuf {
    let out = root.join("phantom");
    let o = fusionseg(&["phantom", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.json")
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&fusionseg(&["--help"])), 0);
    assert_eq!(code(&fusionseg(&[])), 1);
    assert_eq!(code(&fusionseg(&["frobnicate"])), 1);
    assert_eq!(code(&fusionseg(&["train", "--out", "/tmp/x"])), 1);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "train": { "learning_rate": 0.1 } }"#).unwrap();
    let out = dir.path().join("out");
    let o = fusionseg(&["phantom", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!out.exists());

    std::fs::write(&cfg, r#"{ "phantom": { "n_studies": 0 } }"#).unwrap();
    assert_eq!(code(&fusionseg(&["phantom", "--config", s(&cfg), "--out", s(&out)])), 1);
}

#[test]
fn missing_manifest_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = fusionseg(&["register", "--input", s(&missing), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn lock_file_and_output_directory_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = phantom(dir.path(), &cfg);
    let out = manifest.parent().unwrap();

    let lock: RunConfig = serde_json::from_str(&std::fs::read_to_string(out.join(LOCK_FILE)).unwrap()).unwrap();
    assert_eq!(lock.phantom.n_studies, 3);
    assert_eq!(lock.train.patch_size, [16, 16, 8]);
    assert_eq!(load_manifest(&manifest).unwrap().len(), 3);

    let again = fusionseg(&["phantom", "--config", s(&cfg), "--out", s(out)]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    // A lock file is itself a valid configuration.
    let forced = fusionseg(&["phantom", "--config", s(&out.join(LOCK_FILE)), "--out", s(out), "--force"]);
    assert_eq!(code(&forced), 0);
}

/// Probability maps equal to the clinically significant lesion masks.
fn perfect_predictions(manifest: &Path, dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let mut listed = Vec::new();
    for m in load_manifest(manifest).unwrap() {
        let labels = nifti_read(&m.lesions).unwrap();
        let prob = labels.map(|v| {
            let gg = m.lesion_gg.get(&(v as u32).to_string()).copied().unwrap_or(0);
            if v > 0.0 && gg >= 2 { 1.0 } else { 0.0 }
        })
        .unwrap();
        let name = format!("{}_cspca.nii", m.study_id);
        nifti_write(&prob, &dir.join(&name)).unwrap();
        listed.push(serde_json::json!({
            "study_id": m.study_id, "gland": name, "any_cancer": name, "cspca": name
        }));
    }
    std::fs::write(dir.join("predictions.json"), serde_json::to_string(&listed).unwrap()).unwrap();
}

#[test]
fn evaluate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = phantom(dir.path(), &cfg);
    let preds = dir.path().join("preds");
    perfect_predictions(&manifest, &preds);
    let out = dir.path().join("eval");
    let o = fusionseg(&["evaluate", "--config", s(&cfg), "--input", s(&manifest), "--predictions", s(&preds), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["counts"]["tp"].as_u64().unwrap() > 0);
    assert_eq!(report["sensitivity"], 1.0);
    assert_eq!(report["counts"]["fn_"], 0);
    assert_eq!(report["counts"]["fp"], 0);
    for f in ["cases.csv", "lesions.csv", "roc.csv", "pr.csv", "roc.svg", "pr.svg", LOCK_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn prediction_on_the_wrong_grid_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = phantom(dir.path(), &cfg);
    let preds = dir.path().join("preds");
    perfect_predictions(&manifest, &preds);
    let m = &load_manifest(&manifest).unwrap()[0];
    let small = nifti_read(&m.t2w).unwrap();
    nifti_write(&small, &preds.join(format!("{}_cspca.nii", m.study_id))).unwrap();
    let o = fusionseg(&["evaluate", "--config", s(&cfg), "--input", s(&manifest), "--predictions", s(&preds), "--out", s(&dir.path().join("e"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

/// phantom → register → train → infer → evaluate, returning the final directory's report bytes.
fn full_run(root: &Path) -> (Vec<u8>, Vec<u8>, PathBuf) {
    let cfg = tiny_config(root);
    let manifest = phantom(root, &cfg);
    let c = s(&cfg);
    let reg = root.join("reg");
    let train = root.join("train");
    let infer = root.join("infer");
    let eval = root.join("eval");
    let (reg_manifest, ckpt) = (reg.join("manifest.json"), train.join("model.ckpt"));
    let steps: [Vec<&str>; 4] = [
        vec!["register", "--config", c, "--input", s(&manifest), "--out", s(&reg)],
        vec!["train", "--config", c, "--input", s(&reg_manifest), "--out", s(&train), "--setup", "multimodal"],
        vec![
            "infer", "--config", c, "--input", s(&reg_manifest), "--out", s(&infer),
            "--checkpoint", s(&ckpt), "--setup", "multimodal",
        ],
        vec!["evaluate", "--config", c, "--input", s(&manifest), "--predictions", s(&infer), "--out", s(&eval)],
    ];
    for args in &steps {
        let o = fusionseg(args);
        assert_eq!(code(&o), 0, "{:?}: {}", args[0], String::from_utf8_lossy(&o.stderr));
    }
    assert!(train.join("loss.csv").is_file());
    assert!(train.join("checkpoints").read_dir().unwrap().next().is_some());
    (std::fs::read(&ckpt).unwrap(), std::fs::read(eval.join("report.json")).unwrap(), eval)
}

#[test]
fn pipeline_is_deterministic_and_reports_compare() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ckpt_a, report_a, eval) = full_run(a.path());
    let (ckpt_b, report_b, _) = full_run(b.path());
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(report_a, report_b);

    let out = a.path().join("report");
    let e = s(&eval);
    let o = fusionseg(&["report", "--trus", e, "--mri", e, "--multimodal", e, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    assert!(out.join("roc.svg").is_file() && out.join("pr.svg").is_file());

    let wrong = fusionseg(&[
        "infer", "--input", s(&a.path().join("reg/manifest.json")), "--out", s(&a.path().join("i2")),
        "--checkpoint", s(&a.path().join("train/model.ckpt")), "--setup", "trus",
    ]);
    assert_eq!(code(&wrong), 1);
}
