//! End-to-end runs of the `roadseg` binary: synth -> make-patches -> train
//! -> predict -> evaluate, plus exit codes and reproducibility.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roadseg"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path) -> PathBuf {
    let cfg = format!(
        r#"
seed = 7
output_dir = "{out}"

[data]
image_dir = "{root}/raw/images"
mask_dir = "{root}/raw/masks"
patch_dir = "{root}/patches"

[patches]
patch_size = 64
stride = 64

[augment]
rotation_range = 5.0
width_shift_range = 0.05
height_shift_range = 0.05
shear_range = 2.0
zoom_range = 0.05

[train]
variant = "unet-32"
first_layer_channels = 4
batch_size = 4
max_epochs = 1
initial_lr = 0.001

[ensemble]
decision_threshold = 0.25
"#,
        out = dir.join("out").display(),
        root = dir.display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn dir_file_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out
}

#[test]
fn full_pipeline_runs_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());

    // Synthetic data (6 pairs of 128x128).
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "6", "--size", "128"]));
    assert_eq!(
        std::fs::read_dir(tmp.path().join("raw/images")).unwrap().count(),
        6
    );

    // Patches: 128/64 -> 2x2 grid per image, 24 total, plus manifest.
    run_ok(bin().arg("--config").arg(&config).arg("make-patches"));
    let patch_images = tmp.path().join("patches/images");
    assert_eq!(std::fs::read_dir(&patch_images).unwrap().count(), 24);
    let manifest = std::fs::read_to_string(tmp.path().join("patches/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 25, "header plus one row per patch");

    // Idempotence: a rerun rewrites byte-identical patches.
    let before = dir_file_bytes(&patch_images);
    run_ok(bin().arg("--config").arg(&config).arg("make-patches"));
    assert_eq!(before, dir_file_bytes(&patch_images));

    // Train one epoch of the small test variant.
    run_ok(bin().arg("--config").arg(&config).arg("train"));
    let out_dir = tmp.path().join("out");
    let ckpt = out_dir.join("unet-32.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("unet-32.ckpt.json").exists());
    assert!(out_dir.join("loss_curve.png").exists());
    assert!(out_dir.join("config.toml").exists(), "config echoed");
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_f1,val_iou,lr\n"));
    assert_eq!(history.lines().count(), 2);

    // Rerun with the same seed into a fresh directory: identical history.
    let out2 = tmp.path().join("out2");
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("--output-dir")
        .arg(&out2)
        .arg("train"));
    let history2 = std::fs::read_to_string(out2.join("history.csv")).unwrap();
    assert_eq!(history, history2, "same seed, same history file");

    // Predict over the raw images with the single checkpoint.
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("predict")
        .arg("--checkpoints")
        .arg(&ckpt)
        .arg("--image-dir")
        .arg(tmp.path().join("raw/images")));
    let submission = std::fs::read_to_string(out_dir.join("submission.csv")).unwrap();
    // 6 images of 128x128 -> 64 chunks each.
    assert_eq!(submission.lines().count(), 1 + 6 * 64);
    assert!(submission.starts_with("id,prediction\n"));
    assert_eq!(
        std::fs::read_dir(out_dir.join("overlays")).unwrap().count(),
        6
    );

    // Evaluate truth against itself: perfect scores, eps-0 dice of 0.
    let out = run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("evaluate")
        .arg("--pred")
        .arg(tmp.path().join("raw/masks"))
        .arg("--truth")
        .arg(tmp.path().join("raw/masks")));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("dice_loss 0.000000"), "{text}");
    assert!(text.contains("iou 1.000000"), "{text}");
    assert!(text.contains("f1_pixel 1.000000"), "{text}");
    assert!(text.contains("f1_patch 1.000000"), "{text}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["f1_patch"], 1.0);
}

#[test]
fn unknown_variant_exits_2_listing_names() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let out = bin()
        .arg("--config")
        .arg(&config)
        .args(["--variant", "alexnet", "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("unet-32"), "{err}");
    assert!(err.contains("unet-64"), "{err}");
    assert!(err.contains("unet-dilated"), "{err}");
    assert!(err.contains("sliding-window"), "{err}");
}

#[test]
fn predict_with_missing_checkpoint_fails_before_writing() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "2", "--size", "64"]));
    let out = bin()
        .arg("--config")
        .arg(&config)
        .arg("predict")
        .arg("--checkpoints")
        .arg(tmp.path().join("missing.ckpt"))
        .arg("--image-dir")
        .arg(tmp.path().join("raw/images"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("out/submission.csv").exists());
}

#[test]
fn evaluate_reports_unmatched_files() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "2", "--size", "64"]));
    // Drop one mask from a copied directory to create an extra.
    let partial = tmp.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(tmp.path().join("raw/masks"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    std::fs::copy(&names[0], partial.join(names[0].file_name().unwrap())).unwrap();

    let out = bin()
        .arg("--config")
        .arg(&config)
        .arg("evaluate")
        .arg("--pred")
        .arg(&partial)
        .arg("--truth")
        .arg(tmp.path().join("raw/masks"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    let missing = names[1].file_name().unwrap().to_string_lossy().into_owned();
    assert!(err.contains(&missing), "{err}");
}

#[test]
fn sliding_window_variant_trains_and_predicts() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "4", "--size", "64"]));
    run_ok(bin().arg("--config").arg(&config).arg("make-patches"));
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["--variant", "sliding-window", "train"]));
    let ckpt = tmp.path().join("out/sliding-window.ckpt");
    assert!(ckpt.exists());
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("out/sliding-window.ckpt.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["spec"]["variant"], "sliding-window");

    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("predict")
        .arg("--checkpoints")
        .arg(&ckpt)
        .arg("--image-dir")
        .arg(tmp.path().join("raw/images")));
    let submission =
        std::fs::read_to_string(tmp.path().join("out/submission.csv")).unwrap();
    assert_eq!(submission.lines().count(), 1 + 4 * 16);
}

#[test]
fn dilated_checkpoint_metadata_records_dilations() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "4", "--size", "64"]));
    run_ok(bin().arg("--config").arg(&config).arg("make-patches"));
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["--variant", "unet-dilated", "train"]));
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("out/unet-dilated.ckpt.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["spec"]["variant"], "unet-dilated");
    assert_eq!(meta["spec"]["dilations"], serde_json::json!([1, 2, 4, 8]));
}

#[test]
fn empty_image_dir_writes_header_only_submission_with_warning() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "4", "--size", "64"]));
    run_ok(bin().arg("--config").arg(&config).arg("make-patches"));
    run_ok(bin().arg("--config").arg(&config).arg("train"));

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("predict")
        .arg("--checkpoints")
        .arg(tmp.path().join("out/unet-32.ckpt"))
        .arg("--image-dir")
        .arg(&empty));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let submission =
        std::fs::read_to_string(tmp.path().join("out/submission.csv")).unwrap();
    assert_eq!(submission, "id,prediction\n");
}

#[test]
fn evaluate_scores_known_fixtures() {
    use ndarray::Array2;
    use roadseg::dataset::io::save_mask;
    use roadseg::dataset::BinaryMask;

    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    let pred_dir = tmp.path().join("fx_pred");
    let truth_dir = tmp.path().join("fx_truth");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&truth_dir).unwrap();

    // Pred labels chunk (0,0); truth labels chunks (0,0) and (0,1):
    // patch-level tp=1, fn=1, fp=0 -> patch F1 = 2/3.
    let mut pred = Array2::<u8>::zeros((32, 32));
    for i in 0..16 {
        for j in 0..16 {
            pred[[i, j]] = 1;
        }
    }
    let mut truth = Array2::<u8>::zeros((32, 32));
    for i in 0..16 {
        for j in 0..32 {
            truth[[i, j]] = 1;
        }
    }
    save_mask(&BinaryMask::new(pred).unwrap(), &pred_dir.join("a.png")).unwrap();
    save_mask(&BinaryMask::new(truth).unwrap(), &truth_dir.join("a.png")).unwrap();

    let out = run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("evaluate")
        .arg("--pred")
        .arg(&pred_dir)
        .arg("--truth")
        .arg(&truth_dir));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("f1_patch 0.666667"), "{text}");
    assert!(text.contains("iou 0.500000"), "{text}");

    // Disjoint masks: IoU 0.
    let mut pred2 = Array2::<u8>::zeros((32, 32));
    pred2[[20, 20]] = 1;
    let mut truth2 = Array2::<u8>::zeros((32, 32));
    truth2[[0, 0]] = 1;
    save_mask(&BinaryMask::new(pred2).unwrap(), &pred_dir.join("a.png")).unwrap();
    save_mask(&BinaryMask::new(truth2).unwrap(), &truth_dir.join("a.png")).unwrap();
    let out = run_ok(bin()
        .arg("--config")
        .arg(&config)
        .arg("evaluate")
        .arg("--pred")
        .arg(&pred_dir)
        .arg("--truth")
        .arg(&truth_dir));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("iou 0.000000"), "{text}");
}

#[test]
fn output_dir_env_var_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path());
    run_ok(bin()
        .arg("--config")
        .arg(&config)
        .args(["synth", "--count", "2", "--size", "64"]));
    let env_out = tmp.path().join("env_out");
    run_ok(bin()
        .env("ROADSEG_OUTPUT_DIR", &env_out)
        .arg("--config")
        .arg(&config)
        .arg("make-patches"));
    assert!(env_out.join("config.toml").exists());
}
