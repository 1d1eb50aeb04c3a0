//! End-to-end tests of the command-line surface: every subcommand, the
//! documented output formats, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triq::backbone::save_feature_map;
use triq::dataio::{save_image, save_manifest, DatasetRecord, Manifest};
use triq::model::load_checkpoint;
use triq::numerics::Tensor;

fn triq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triq"))
        .args(args)
        .output()
        .expect("spawn triq")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_dataset(dir: &Path, n: usize) -> PathBuf {
    let mut records = Vec::new();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let mut img = Tensor::zeros(vec![24, 24, 3]);
        for v in img.data.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let path = dir.join(format!("img_{i}.png"));
        save_image(&img, &path).unwrap();
        // two MOS classes so every stratum is populated and a 75/25
        // split leaves both sides non-empty
        records.push(DatasetRecord {
            image_ref: path,
            mos: if i % 2 == 0 { 2.0 } else { 4.0 },
            score_std: Some(0.6),
            distribution: None,
            si: None,
            stratum: None,
            split: None,
        });
    }
    let manifest = dir.join("all.csv");
    save_manifest(&Manifest { records }, &manifest).unwrap();
    manifest
}

const TINY_CONFIG: &str = r#"
[model]
n_max_tokens = 64

[model.backbone]
stage_channels = [2, 2, 4, 4, 8]

[model.encoder]
n_layers = 1
d_model = 8
n_heads = 2
d_ff = 16
dropout_rate = 0.0

[train]
total_steps = 12
eval_every = 6
"#;

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 24);
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();

    // split: deterministic per seed, byte-for-byte
    let prefix = dir.path().join("splits");
    let out = triq(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--train-frac",
        "0.75",
        "--seed",
        "3",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train_csv = dir.path().join("splits.train.csv");
    let test_csv = dir.path().join("splits.test.csv");
    let first = std::fs::read(&train_csv).unwrap();
    triq(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--train-frac",
        "0.75",
        "--seed",
        "3",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(first, std::fs::read(&train_csv).unwrap());

    // train
    let out_dir = dir.path().join("run");
    let out = triq(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--train-manifest",
        train_csv.to_str().unwrap(),
        "--eval-manifest",
        test_csv.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights = out_dir.join("best.wght");
    assert!(weights.exists());
    assert!(out_dir.join("report.csv").exists());
    let report = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("step,loss,plcc,srocc,rmse"));

    // the checkpoint header echoes the configured architecture
    let (model, meta) = load_checkpoint(&weights).unwrap();
    assert_eq!(model.config.encoder.n_layers, 1);
    assert!(meta["plcc"].is_number());

    // predict: five probabilities + mos, deterministic
    let image0 = dir.path().join("img_0.png");
    let out = triq(&["predict", "--weights", weights.to_str().unwrap(), "--image", image0.to_str().unwrap()]);
    assert!(out.status.success());
    let line = stdout(&out);
    let fields: Vec<f64> = line
        .split_whitespace()
        .map(|f| f.parse().unwrap())
        .collect();
    assert_eq!(fields.len(), 6);
    let sum: f64 = fields[..5].iter().sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert!((1.0..=5.0).contains(&fields[5]));
    let again = triq(&["predict", "--weights", weights.to_str().unwrap(), "--image", image0.to_str().unwrap()]);
    assert_eq!(line, stdout(&again));

    // predict from an exported feature map matches the image path
    let img = triq_load(&image0);
    let fm = model.backbone.as_ref().unwrap().extract_features(&img).unwrap();
    let fmap_path = dir.path().join("img_0.fmap");
    save_feature_map(&fm, &fmap_path).unwrap();
    let from_fmap = triq(&["predict", "--weights", weights.to_str().unwrap(), "--image", fmap_path.to_str().unwrap()]);
    assert!(from_fmap.status.success());
    assert_eq!(line, stdout(&from_fmap));

    // evaluate
    let eval_prefix = dir.path().join("eval");
    let out = triq(&[
        "evaluate",
        "--weights",
        weights.to_str().unwrap(),
        "--manifest",
        test_csv.to_str().unwrap(),
        "--out",
        eval_prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("eval.metrics.csv")).unwrap();
    assert!(metrics.starts_with("n,plcc,srocc,rmse"));
    assert!(dir.path().join("eval.predictions.csv").exists());

    // visualize
    let viz_prefix = dir.path().join("viz");
    let out = triq(&[
        "visualize",
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image0.to_str().unwrap(),
        "--layer",
        "mean",
        "--out",
        viz_prefix.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for suffix in ["mask.png", "overlay.png"] {
        let img = image::open(dir.path().join(format!("viz.{suffix}"))).unwrap();
        assert_eq!((img.width(), img.height()), (24, 24));
    }
    // out-of-range layer index is a usage error
    let out = triq(&[
        "visualize",
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image0.to_str().unwrap(),
        "--layer",
        "99",
        "--out",
        viz_prefix.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // finetune from the checkpoint
    let ft_dir = dir.path().join("ft");
    let out = triq(&[
        "finetune",
        "--from-checkpoint",
        weights.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--train-manifest",
        train_csv.to_str().unwrap(),
        "--eval-manifest",
        test_csv.to_str().unwrap(),
        "--out-dir",
        ft_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ft_dir.join("best.wght").exists());
}

fn triq_load(path: &Path) -> Tensor {
    triq::dataio::load_image(path).unwrap()
}

#[test]
fn single_record_evaluate_reports_rmse_only() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 2);
    // cut the manifest to one record
    let text = std::fs::read_to_string(&manifest).unwrap();
    let one: Vec<&str> = text.lines().take(2).collect();
    let single = dir.path().join("one.csv");
    std::fs::write(&single, one.join("\n") + "\n").unwrap();

    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out_dir = dir.path().join("run");
    let out = triq(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "2",
        "--train-manifest",
        manifest.to_str().unwrap(),
        "--eval-manifest",
        manifest.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights = out_dir.join("best.wght");
    let out = triq(&[
        "evaluate",
        "--weights",
        weights.to_str().unwrap(),
        "--manifest",
        single.to_str().unwrap(),
        "--out",
        dir.path().join("eval1").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("correlation unavailable"));
    let metrics = std::fs::read_to_string(dir.path().join("eval1.metrics.csv")).unwrap();
    let data_line = metrics.lines().nth(1).unwrap();
    assert!(data_line.starts_with("1,,,"), "{data_line}");
}

#[test]
fn usage_errors_exit_with_code_2() {
    let out = triq(&[
        "evaluate",
        "--weights",
        "/nonexistent.wght",
        "--manifest",
        "/nonexistent.csv",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = triq(&[
        "train",
        "--train-manifest",
        "/nonexistent.csv",
        "--eval-manifest",
        "/nonexistent.csv",
        "--out-dir",
        "/tmp/triq-missing",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
