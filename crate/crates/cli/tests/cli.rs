use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use naf::filters::{jbu, BilateralConfig};
use naf::image_io::save_png;
use naf::model::{ModelConfig, NafModel};
use naf::npy::{load_npy, save_npy};
use naf::random::{rng, uniform_tensor};
use naf::Tensor3;
use tempfile::TempDir;

fn naf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_naf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = naf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn random(h: usize, w: usize, c: usize, seed: u64) -> Tensor3 {
    uniform_tensor(h, w, c, 0.0, 1.0, &mut rng(seed))
}

/// Small checkpoint, a feature map and a guidance image.
fn fixture(dir: &Path, lr: (usize, usize), img: (usize, usize)) -> (PathBuf, PathBuf, PathBuf) {
    let weights = dir.join("weights");
    let cfg = ModelConfig {
        depth: 1,
        channels: 8,
        kernel: 3,
        ..ModelConfig::default()
    };
    NafModel::init(cfg, 3).unwrap().save(&weights).unwrap();
    let feats = dir.join("feats.npy");
    save_npy(&random(lr.0, lr.1, 4, 1), &feats).unwrap();
    let image = dir.join("image.png");
    save_png(&random(img.0, img.1, 3, 2), &image).unwrap();
    (weights, feats, image)
}

#[test]
fn flops_reports_the_reference_configuration() {
    let v: serde_json::Value = serde_json::from_str(&ok(&["flops"])).unwrap();
    assert_eq!(v["params"], 729_856);
    assert_eq!(v["flops"]["logits"].as_f64().unwrap(), 448.0 * 448.0 * 81.0 * 512.0);
    assert_eq!(v["flops"]["logits_ratio"].as_f64().unwrap(), 81.0 / 784.0);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(naf(&["nonsense"]).status.code(), Some(2));
    assert_eq!(naf(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(naf(&["bench", "--seed", "1", "--repeats", "0"]).status.code(), Some(2));
    assert_eq!(naf(&["--threads", "0", "flops"]).status.code(), Some(2));
    assert_eq!(naf(&["flops", "--kernel", "4"]).status.code(), Some(2));
    assert_eq!(naf(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_one_and_name_the_file() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.npy");
    let out = naf(&["filter", "--method", "gaussian", "--input", s(&missing), "--out", s(&dir.path().join("o.npy"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.npy"));
}

#[test]
fn upsample_matches_the_library_and_infers_the_scale() {
    let dir = TempDir::new().unwrap();
    let (weights, feats, image) = fixture(dir.path(), (28, 28), (448, 448));
    let out = dir.path().join("up.npy");
    ok(&["upsample", "--features", s(&feats), "--image", s(&image), "--weights", s(&weights), "--out", s(&out)]);
    let got = load_npy(&out).unwrap();
    assert_eq!(got.dims(), (448, 448, 4));
    let model = NafModel::load(&weights).unwrap();
    let lib = model
        .upsample(&load_npy(&feats).unwrap(), &naf::image_io::load_png(&image).unwrap(), 16)
        .unwrap();
    let lib_path = dir.path().join("lib.npy");
    save_npy(&lib, &lib_path).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&lib_path).unwrap());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("up.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["scale"], 16);
    assert_eq!(m["steps"].as_array().unwrap().len(), 1);
}

#[test]
fn upsample_with_inexact_dims_resizes_after_integer_scale() {
    let dir = TempDir::new().unwrap();
    let (weights, feats, image) = fixture(dir.path(), (7, 7), (114, 112));
    let out = dir.path().join("up.npy");
    ok(&["upsample", "--features", s(&feats), "--image", s(&image), "--weights", s(&weights), "--out", s(&out)]);
    assert_eq!(load_npy(&out).unwrap().dims(), (114, 112, 4));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("up.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["scale"], 16);
    let steps = m["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    assert!(steps[2].as_str().unwrap().contains("112x112 -> 114x112"));
}

#[test]
fn unit_scale_upsampling_filters_in_place() {
    let dir = TempDir::new().unwrap();
    let (weights, feats, image) = fixture(dir.path(), (12, 12), (12, 12));
    let out = dir.path().join("f.npy");
    ok(&[
        "upsample", "--features", s(&feats), "--image", s(&image), "--weights", s(&weights), "--scale", "1", "--out", s(&out),
    ]);
    assert_eq!(load_npy(&out).unwrap().dims(), (12, 12, 4));
}

#[test]
fn analyze_map_is_a_normalized_window() {
    let dir = TempDir::new().unwrap();
    let (weights, _, image) = fixture(dir.path(), (4, 4), (32, 32));
    let out = dir.path().join("map.npy");
    ok(&[
        "analyze", "--map", "p=10,10", "--weights", s(&weights), "--image", s(&image), "--scale", "4", "--kernel", "5", "--out", s(&out),
    ]);
    let map = load_npy(&out).unwrap();
    assert_eq!(map.dims(), (5, 5, 1));
    let total: f64 = map.data().iter().map(|&v| v as f64).sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert!(dir.path().join("map.png").exists());
}

#[test]
fn analyze_trig_maps_peak_at_the_center() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cos.npy");
    let sin = dir.path().join("sin.npy");
    ok(&["analyze", "--trig", "9", "--out", s(&out), "--extra-out", s(&sin)]);
    let c = load_npy(&out).unwrap();
    assert_eq!(c.dims(), (9, 9, 1));
    assert!((c.get(4, 4, 0) - 1.0).abs() < 1e-6);
    assert!(c.data().iter().all(|&v| v <= c.get(4, 4, 0)));
    assert_eq!(load_npy(&sin).unwrap().dims(), (9, 9, 1));
}

#[test]
fn filter_jbu_is_byte_identical_to_the_library() {
    let dir = TempDir::new().unwrap();
    let (_, feats, image) = fixture(dir.path(), (6, 6), (24, 24));
    let out = dir.path().join("jbu.npy");
    ok(&[
        "filter", "--method", "jbu", "--input", s(&feats), "--guidance", s(&image), "--sigma-r", "0.2", "--out", s(&out),
    ]);
    let cfg = BilateralConfig {
        sigma_r: 0.2,
        ..BilateralConfig::default()
    };
    let lib = jbu(&load_npy(&feats).unwrap(), &naf::image_io::load_png(&image).unwrap(), 4, &cfg).unwrap();
    let lib_path = dir.path().join("lib.npy");
    save_npy(&lib, &lib_path).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&lib_path).unwrap());
}

fn checkpoint_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn train_args<'a>(out: &'a str, threads: &'a str) -> Vec<&'a str> {
    vec![
        "--threads", threads, "train", "--seed", "5", "--iterations", "12", "--size", "32", "--channels", "8", "--batch", "2", "--out", out,
    ]
}

#[test]
fn training_is_deterministic_and_replayable() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&train_args(s(&a), "1"));
    ok(&train_args(s(&b), "2"));
    let files = checkpoint_files(&a);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert!(files.iter().any(|(n, _)| n == "loss.csv"));
    assert_eq!(files, checkpoint_files(&b));
    // replay reproduces the run in place
    let before = checkpoint_files(&a);
    fs::remove_file(a.join("pixel.0.weight.npy")).unwrap();
    ok(&["replay", s(&a.join("run_manifest.json"))]);
    assert_eq!(checkpoint_files(&a), before);
}

#[test]
fn training_config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"batch_size": 1, "stages": [{"iterations": 3, "input_sizes": [16], "target_size": 32}]}"#).unwrap();
    let out = dir.path().join("ck");
    ok(&["train", "--seed", "1", "--config", s(&cfg), "--iterations", "4", "--channels", "8", "--out", s(&out)]);
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["batch_size"], 1);
    assert_eq!(m["config"]["train"]["model"]["channels"], 8);
    assert_eq!(m["seeds"]["train"], 1);
}

#[test]
fn denoise_train_and_apply() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("den");
    let stdout = ok(&[
        "denoise", "train", "--seed", "2", "--iterations", "5", "--size", "24", "--kernel", "3", "--channels", "8", "--eval", "2", "--out", s(&ck),
    ]);
    assert!(stdout.contains("denoised PSNR="));
    let clean = dir.path().join("clean.png");
    save_png(&random(20, 20, 3, 9), &clean).unwrap();
    let out = dir.path().join("out.png");
    let metrics = dir.path().join("m.csv");
    let text = ok(&[
        "denoise", "apply", "--weights", s(&ck), "--input", s(&clean), "--add-noise", "--noise", "channel_salt_pepper", "--level", "0.1",
        "--seed", "4", "--out", s(&out), "--metrics", s(&metrics),
    ]);
    let lines: Vec<&str> = text.lines().filter(|l| l.contains("PSNR=") && l.contains("SSIM=")).collect();
    assert_eq!(lines.len(), 2);
    assert!(out.exists());
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 3);
    let missing_seed = naf(&["denoise", "apply", "--weights", s(&ck), "--input", s(&clean), "--add-noise", "--out", s(&out)]);
    assert_eq!(missing_seed.status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_size() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.csv");
    let text = ok(&[
        "bench", "--seed", "0", "--sizes", "4,6", "--scale", "2", "--kernel", "3", "--channels", "8", "--repeats", "5", "--out", s(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(text.contains("peak_rss_kib="));
    assert!(dir.path().join("bench.manifest.json").exists());
}
