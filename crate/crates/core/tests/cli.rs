mod common;

use std::path::Path;
use std::process::{Command, Output};

use axial_nowcast::cli::{file_hash, to_gray8};
use axial_nowcast::data::Dataset;
use axial_nowcast::metrics::{mse, psnr_from_mse};
use axial_nowcast::training::rollout;
use axial_nowcast::{Checkpoint, Model, Tensor};
use image::{GrayImage, Luma};

fn nowcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nowcast")).args(args).env_remove("NOWCAST_RUN_ROOT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nowcast(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, size: &str, split: [&str; 3]) -> std::path::PathBuf {
    let path = dir.join(name);
    let n: usize = split.iter().map(|s| s.parse::<usize>().unwrap()).sum();
    ok(&[
        "synth",
        p(&path),
        "--sequences",
        &n.to_string(),
        "--size",
        size,
        "--seed",
        "3",
        "--train",
        split[0],
        "--val",
        split[1],
        "--test",
        split[2],
    ]);
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(nowcast(&[]).status.code(), Some(2));
    assert_eq!(nowcast(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(nowcast(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.axsq", "16", ["2", "1", "1"]);
    let bad_model = nowcast(&["train", p(&data), "--model", "transformer"]);
    assert_eq!(bad_model.status.code(), Some(2));
    let missing = nowcast(&["train", "/no/such/file.axsq", "--model", "unet"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/no/such/file.axsq"));
    let half_split = nowcast(&["synth", p(&dir.path().join("x")), "--train", "3"]);
    assert_eq!(half_split.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.axsq");
    std::fs::write(&junk, b"AXSQ but not really").unwrap();
    let out = nowcast(&["train", p(&junk), "--model", "unet"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sequence"));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.axsq", "16", ["3", "1", "1"]);
    let b = synth(dir.path(), "b.axsq", "16", ["3", "1", "1"]);
    assert_eq!(file_hash(&a).unwrap(), file_hash(&b).unwrap());
    let ds = Dataset::load(&a).unwrap();
    assert_eq!(ds.dims().unwrap(), (20, 16, 16));
}

#[test]
fn axial_training_uses_default_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.axsq", "16", ["2", "1", "1"]);
    let run = dir.path().join("run");
    ok(&["train", p(&data), "--model", "axial-unet", "--out", p(&run)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let cfg = &manifest["config"];
    assert_eq!(
        (cfg["epochs"].as_u64(), cfg["lr"].as_f64(), cfg["batch_size"].as_u64()),
        (Some(15), Some(1e-4), Some(1))
    );
    assert_eq!(manifest["dataset_sha256"].as_str().unwrap(), file_hash(&data).unwrap());
    assert_eq!(manifest["model"]["arch"]["kind"], "axial_unet");
    assert!(manifest["finished_unix"].as_u64().unwrap() >= manifest["started_unix"].as_u64().unwrap());
    assert!(manifest["version"].as_str().unwrap().starts_with('v'));
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17, "header, epoch 0 and 15 epochs");
    Model::from_checkpoint(&Checkpoint::load(&run.join("checkpoint.axnw")).unwrap()).unwrap();
}

#[test]
fn run_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.axsq", "16", ["4", "1", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_nowcast"))
        .args(["train", p(&data), "--model", "convlstm", "--epochs", "1", "--seed", "9"])
        .env("NOWCAST_RUN_ROOT", dir.path().join("runs"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/convlstm-seed9");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((manifest["config"]["lr"].as_f64(), manifest["config"]["batch_size"].as_u64()), (Some(1e-3), Some(2)));
    assert_eq!(manifest["seed"].as_u64(), Some(9));
}

#[test]
fn evaluate_reports_against_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.axsq", "16", ["4", "1", "3"]);
    let run = dir.path().join("run");
    ok(&["train", p(&data), "--model", "convlstm", "--epochs", "1", "--out", p(&run)]);
    let ckpt = run.join("checkpoint.axnw");
    let reports = dir.path().join("eval");
    let text = ok(&["evaluate", p(&ckpt), p(&data), "--steps", "5", "--out", p(&reports)]);
    assert!(text.contains("PSNR") && text.contains("SSIM"), "{text}");
    assert!(text.contains("Persistence") && text.contains("ConvLSTM"), "{text}");
    assert!(text.contains("Higher is better"), "{text}");
    let csv = std::fs::read_to_string(reports.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
    let base = std::fs::read_to_string(reports.join("persistence.csv")).unwrap();
    assert_eq!(base.lines().count(), 1 + 3 * 5);
    // Only five frames follow a fifteen-frame window.
    assert_eq!(nowcast(&["evaluate", p(&ckpt), p(&data), "--steps", "6"]).status.code(), Some(2));
    let windowed = ok(&["evaluate", p(&ckpt), p(&data), "--windowed-ssim", "7"]);
    assert!(windowed.contains("x 5 steps"), "{windowed}");

    let rolled = ok(&["rollout", p(&ckpt), p(&data), "--sequence", "2", "--steps", "3"]);
    assert_eq!(rolled.lines().count(), 4);
    assert!(rolled.starts_with("step,mse,psnr,ssim\n1,"));

    let other = synth(dir.path(), "e.axsq", "32", ["1", "1", "1"]);
    let mismatch = nowcast(&["evaluate", p(&ckpt), p(&other)]);
    assert_eq!(mismatch.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&mismatch.stderr);
    assert!(msg.contains("16x16") && msg.contains("32x32"), "{msg}");
}

fn read_pgm(path: &Path) -> GrayImage {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..2], b"P5", "{} is not a binary PGM", path.display());
    image::load_from_memory(&bytes).unwrap().to_luma8()
}

#[test]
fn render_writes_quantized_frame_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.axsq", "16", ["2", "1", "2"]);
    let run = dir.path().join("run");
    ok(&["train", p(&data), "--model", "unet", "--epochs", "1", "--out", p(&run)]);
    let out_dir = dir.path().join("frames");
    let ckpt = run.join("checkpoint.axnw");
    ok(&["render", p(&ckpt), p(&data), "1", "--steps", "4", "--out-dir", p(&out_dir)]);
    let mut names: Vec<String> =
        std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let expect: Vec<String> =
        (1..=4).map(|t| format!("output_{t}.pgm")).chain((1..=4).map(|t| format!("target_{t}.pgm"))).collect();
    assert_eq!(names, expect);

    let ds = Dataset::load(&data).unwrap();
    let seq = &ds.test[1];
    let model = Model::from_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    let pred = rollout(&model, &seq.window(0, 16), 4).unwrap();
    for t in 0..4 {
        for (name, frame) in [("target", seq.frame(16 + t)), ("output", pred.index_first(t))] {
            let img = read_pgm(&out_dir.join(format!("{name}_{}.pgm", t + 1)));
            assert_eq!(img.as_raw(), &to_gray8(&frame));
            for (&px, &v) in img.as_raw().iter().zip(frame.data()) {
                assert_eq!(px as f64, (255.0 * v).round());
            }
            // The display path is lossy, but never by more than half a level.
            let shown = Tensor::new(frame.shape(), img.as_raw().iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
            let q = mse(&shown, &frame).unwrap();
            assert!(psnr_from_mse(q) >= 20.0 * (2.0f64 * 255.0).log10() - 1e-9);
        }
    }
    let bad = nowcast(&["render", p(&ckpt), p(&data), "9", "--out-dir", p(&out_dir)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("0..=1"));
}

fn frame_folder(root: &Path, name: &str, frames: usize, level: impl Fn(usize) -> u8) {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    for k in 0..frames {
        GrayImage::from_pixel(12, 12, Luma([level(k)])).save(dir.join(format!("{k:04}.png"))).unwrap();
    }
}

#[test]
fn preprocess_prints_stage_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("radar");
    frame_folder(&input, "a", 240, |_| 120);
    frame_folder(&input, "b", 250, |k| if k < 20 && k >= 5 { 0 } else { 121 });
    frame_folder(&input, "c", 239, |_| 90);
    let out1 = dir.path().join("one.axsq");
    let text = ok(&["preprocess", p(&input), p(&out1), "--size", "8", "--seed", "4"]);
    assert!(text.contains("folders found: 3"), "{text}");
    assert!(text.contains("folders accepted: 2"), "{text}");
    assert!(text.contains("rejected: 1"), "{text}");
    assert!(text.contains("24 sequences of length 20 before filtering"), "{text}");
    assert!(text.contains("sequences dropped (> 10 bad): 1"), "{text}");
    assert!(text.contains("23 sequences after filtering"), "{text}");
    let ds = Dataset::load(&out1).unwrap();
    assert_eq!(ds.dims().unwrap(), (20, 8, 8));
    assert_eq!(ds.all().count(), 23);

    let out2 = dir.path().join("two.axsq");
    ok(&["preprocess", p(&input), p(&out2), "--size", "8", "--seed", "4"]);
    assert_eq!(file_hash(&out1).unwrap(), file_hash(&out2).unwrap());

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(nowcast(&["preprocess", p(&empty), p(&out2)]).status.code(), Some(1));
    assert_eq!(nowcast(&["preprocess", "/no/such/dir", p(&out2)]).status.code(), Some(2));
}
