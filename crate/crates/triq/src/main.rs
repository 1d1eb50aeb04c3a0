//! Command-line entry point: split | train | finetune | predict |
//! evaluate | visualize.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use triq::attnviz::{attention_mask, overlay, LayerSelect};
use triq::backbone::load_feature_map;
use triq::config::RunConfig;
use triq::dataio::{
    load_image, load_manifest, save_image, save_manifest, spatial_information, stratified_split,
    Manifest, Split,
};
use triq::model::{load_checkpoint, Model};
use triq::numerics::Tensor;
use triq::seeds::subseed;
use triq::trainer::{self, TrainReport};
use triq::{Error, Result};

#[derive(Parser)]
#[command(
    name = "triq",
    about = "Resolution-preserving image quality assessment",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratified train/test split by spatial information and MOS
    Split(SplitArgs),
    /// Train a model from scratch
    Train(TrainArgs),
    /// Continue training from a checkpoint at the finetune learning rate
    Finetune(FinetuneArgs),
    /// Predict the quality distribution and MOS for one image
    Predict(PredictArgs),
    /// Evaluate a checkpoint against a manifest
    Evaluate(EvaluateArgs),
    /// Render attention masks for one image
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SplitArgs {
    /// Input manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    /// Fraction of each stratum assigned to training
    #[arg(long, default_value_t = 0.85)]
    train_frac: f64,
    /// Shuffle seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes <out>.train.csv and <out>.test.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML (defaults used when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest CSV (overrides the config)
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Evaluation manifest CSV (overrides the config)
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Total optimizer steps (overrides the config)
    #[arg(long)]
    steps: Option<usize>,
    /// Master seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for best.wght and report.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Checkpoint to start from (usually the pretrain best)
    #[arg(long)]
    from_checkpoint: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct PredictArgs {
    /// Weight checkpoint (.wght)
    #[arg(long)]
    weights: PathBuf,
    /// PNG/BMP image, or a .fmap feature-map container (hybrid mode)
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Weight checkpoint (.wght)
    #[arg(long)]
    weights: PathBuf,
    /// Manifest CSV of images with targets
    #[arg(long)]
    manifest: PathBuf,
    /// Output prefix; writes <out>.metrics.csv and <out>.predictions.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Weight checkpoint (.wght)
    #[arg(long)]
    weights: PathBuf,
    /// PNG/BMP image
    #[arg(long)]
    image: PathBuf,
    /// Encoder layer index, or "mean" to average all layers
    #[arg(long, default_value = "last")]
    layer: String,
    /// Mask floor for the overlay blend
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Output prefix; writes <out>.mask.png and <out>.overlay.png
    #[arg(long)]
    out: PathBuf,
}

fn cmd_split(args: &SplitArgs) -> Result<()> {
    let mut manifest = load_manifest(&args.manifest)?;
    for rec in &mut manifest.records {
        if rec.si.is_none() {
            let image = load_image(&rec.image_ref)?;
            rec.si = Some(spatial_information(&image)?);
        }
    }
    stratified_split(&mut manifest, args.train_frac, args.seed)?;
    let pick = |want: Split| Manifest {
        records: manifest
            .records
            .iter()
            .filter(|r| r.split == Some(want))
            .cloned()
            .collect(),
    };
    let train_path = args.out.with_extension("train.csv");
    let test_path = args.out.with_extension("test.csv");
    save_manifest(&pick(Split::Train), &train_path)?;
    save_manifest(&pick(Split::Test), &test_path)?;
    println!(
        "split {} records: {} train -> {}, {} test -> {}",
        manifest.records.len(),
        pick(Split::Train).records.len(),
        train_path.display(),
        pick(Split::Test).records.len(),
        test_path.display()
    );
    Ok(())
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.train_manifest {
        cfg.data.train_manifest = Some(p.clone());
    }
    if let Some(p) = &args.eval_manifest {
        cfg.data.eval_manifest = Some(p.clone());
    }
    if let Some(steps) = args.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_sets(cfg: &RunConfig) -> Result<(Manifest, Manifest)> {
    let train_path = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Param("no training manifest (flag or config)".into()))?;
    let eval_path = cfg
        .data
        .eval_manifest
        .as_ref()
        .ok_or_else(|| Error::Param("no evaluation manifest (flag or config)".into()))?;
    Ok((load_manifest(train_path)?, load_manifest(eval_path)?))
}

fn finish_training(report: &TrainReport, out_dir: &Path) -> Result<()> {
    let report_path = out_dir.join("report.csv");
    trainer::save_report_csv(report, &report_path)?;
    println!(
        "best plcc {:.6} at step {} -> {}",
        report.best_plcc,
        report.best_step,
        report.checkpoint.display()
    );
    println!("history -> {}", report_path.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_run_config(args)?;
    let (train_set, eval_set) = load_sets(&cfg)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let model = Model::new(cfg.model.clone(), subseed(cfg.data.seed, "init"))?;
    let out_path = args.out_dir.join("best.wght");
    let report = trainer::train(
        &model,
        &train_set.records,
        &eval_set.records,
        &cfg.train,
        &out_path,
    )?;
    finish_training(&report, &args.out_dir)
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = load_run_config(&args.train)?;
    let (train_set, eval_set) = load_sets(&cfg)?;
    std::fs::create_dir_all(&args.train.out_dir)
        .map_err(|e| Error::io(&args.train.out_dir, e))?;
    let (model, _) = load_checkpoint(&args.from_checkpoint)?;
    let out_path = args.train.out_dir.join("best.wght");
    let report = trainer::finetune(
        &model,
        &train_set.records,
        &eval_set.records,
        &cfg.train,
        &out_path,
    )?;
    finish_training(&report, &args.train.out_dir)
}

fn forward_any(model: &Model, path: &Path) -> Result<triq::model::ForwardOutput> {
    let mut tape = triq::numerics::Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    if path.extension().is_some_and(|e| e == "fmap") {
        let fm = load_feature_map(path)?;
        model.forward_feature_map(&mut tape, &fm, false, &mut rng)
    } else {
        let image = load_image(path)?;
        model.forward_image(&mut tape, &image, false, &mut rng)
    }
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.weights)?;
    let out = forward_any(&model, &args.image)?;
    let p = out.distribution.p;
    println!(
        "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        p[0], p[1], p[2], p[3], p[4], out.mos
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.weights)?;
    let manifest = load_manifest(&args.manifest)?;
    if manifest.records.is_empty() {
        return Err(Error::Param("empty manifest".into()));
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let pred_path = args.out.with_extension("predictions.csv");
    let mut pw = csv::Writer::from_path(&pred_path)
        .map_err(|e| Error::io(&pred_path, std::io::Error::other(e.to_string())))?;
    pw.write_record(["path", "pred_mos", "target_mos"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for rec in &manifest.records {
        let out = forward_any(&model, &rec.image_ref)?;
        let target = triq::head::mos_from_distribution(&rec.target_distribution()?)?;
        pw.write_record([
            rec.image_ref.display().to_string(),
            format!("{:.6}", out.mos),
            format!("{target:.6}"),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
        pred.push(out.mos);
        truth.push(target);
    }
    pw.flush().map_err(|e| Error::io(&pred_path, e))?;

    let rmse = triq::metrics::rmse(&pred, &truth)?;
    let correlations = triq::metrics::plcc(&pred, &truth)
        .and_then(|p| triq::metrics::srocc(&pred, &truth).map(|s| (p, s)));
    let metrics_path = args.out.with_extension("metrics.csv");
    let mut mw = csv::Writer::from_path(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, std::io::Error::other(e.to_string())))?;
    mw.write_record(["n", "plcc", "srocc", "rmse"])
        .map_err(|e| Error::Format(e.to_string()))?;
    match correlations {
        Ok((plcc, srocc)) => {
            mw.write_record([
                pred.len().to_string(),
                format!("{plcc:.6}"),
                format!("{srocc:.6}"),
                format!("{rmse:.6}"),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
            println!(
                "n={} plcc={plcc:.6} srocc={srocc:.6} rmse={rmse:.6}",
                pred.len()
            );
        }
        Err(e) => {
            // correlations are undefined for n < 2 or constant vectors;
            // RMSE is still meaningful
            mw.write_record([pred.len().to_string(), String::new(), String::new(), format!("{rmse:.6}")])
                .map_err(|e| Error::Format(e.to_string()))?;
            println!("n={} correlation unavailable ({e}) rmse={rmse:.6}", pred.len());
        }
    }
    mw.flush().map_err(|e| Error::io(&metrics_path, e))?;
    println!("predictions -> {}", pred_path.display());
    println!("metrics -> {}", metrics_path.display());
    Ok(())
}

fn gray_to_rgb(mask: &Tensor) -> Tensor {
    let (h, w) = (mask.shape[0], mask.shape[1]);
    let mut out = Tensor::zeros(vec![h, w, 3]);
    for (i, v) in mask.data.iter().enumerate() {
        out.data[i * 3] = *v;
        out.data[i * 3 + 1] = *v;
        out.data[i * 3 + 2] = *v;
    }
    out
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.weights)?;
    let image = load_image(&args.image)?;
    let mut tape = triq::numerics::Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward_image(&mut tape, &image, false, &mut rng)?;
    let layer = match args.layer.as_str() {
        "last" => LayerSelect::Index(out.attention.len().saturating_sub(1)),
        other => LayerSelect::parse(other)?,
    };
    let (h, w) = (image.shape[0], image.shape[1]);
    let mask = attention_mask(&out.attention, layer, out.grid, (h, w))?;
    let blended = overlay(&image, &mask, args.alpha)?;
    let mask_path = args.out.with_extension("mask.png");
    let overlay_path = args.out.with_extension("overlay.png");
    save_image(&gray_to_rgb(&mask), &mask_path)?;
    save_image(&blended, &overlay_path)?;
    println!("mos {:.6}", out.mos);
    println!("mask -> {}", mask_path.display());
    println!("overlay -> {}", overlay_path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Visualize(args) => cmd_visualize(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
