//! End-to-end use of the public API: train, checkpoint, reload, upsample.

use naf::image_io::{load_png, save_png};
use naf::model::NafModel;
use naf::npy::{load_npy, save_npy};
use naf::random::{rng, uniform_tensor};
use naf::training::{train, Stage, SyntheticImages, SyntheticTeacher, TrainConfig};
use naf::Tensor3;

fn short_config(dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.channels = 8;
    cfg.stages = vec![Stage {
        iterations: 20,
        input_sizes: vec![16],
        target_size: 32,
    }];
    cfg.checkpoint_dir = Some(dir.to_path_buf());
    cfg
}

#[test]
fn trained_checkpoint_reloads_and_upsamples_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let teacher = SyntheticTeacher::new(4, 6, 1).unwrap();
    let outcome = train(&cfg, &teacher, &SyntheticImages::new(1), None).unwrap();
    let reloaded = NafModel::load(dir.path()).unwrap();
    assert_eq!(reloaded, outcome.model);

    let mut r = rng(2);
    let image: Tensor3 = uniform_tensor(32, 32, 3, 0.0, 1.0, &mut r);
    let f_lr: Tensor3 = uniform_tensor(8, 8, 5, -1.0, 1.0, &mut r);
    let a = outcome.model.upsample(&f_lr, &image, 4).unwrap();
    let b = reloaded.upsample(&f_lr, &image, 4).unwrap();
    assert_eq!(a.dims(), (32, 32, 5));
    assert_eq!(a, b);
}

#[test]
fn features_survive_npy_and_images_survive_png() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let t: Tensor3 = uniform_tensor(7, 5, 11, -3.0, 3.0, &mut r);
    let path = dir.path().join("f.npy");
    save_npy(&t, &path).unwrap();
    assert_eq!(load_npy(&path).unwrap(), t);

    let img: Tensor3 = uniform_tensor(6, 9, 3, 0.0, 1.0, &mut r);
    let png = dir.path().join("i.png");
    save_png(&img, &png).unwrap();
    let back = load_png(&png).unwrap();
    assert_eq!(back.dims(), img.dims());
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(NafModel::load(dir.path().join("absent")).is_err());
}
