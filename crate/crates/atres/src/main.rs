//! Command-line surface: dataset synthesis, training, stitched prediction,
//! evaluation against ground truth, and gradient checking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atres::check::{op_suite, run_suite, FD_EPSILON, FD_TOLERANCE};
use atres::checkpoint::{load_checkpoint, restore_model};
use atres::config::RunConfig;
use atres::error::{Error, Result};
use atres::image::{
    load_image_png, load_mask_png, overlay_mask, save_image_png, save_mask_png,
    save_prob_png, Transform,
};
use atres::metrics::{
    accuracy, confusion, dice_from_counts, macro_average, sensitivity, specificity,
    ConfusionCounts,
};
use atres::model::Model;
use atres::stitch::{model_ensemble, predict_full, self_ensemble, threshold_map, Fill};
use atres::synth::{generate_dataset, read_manifest};
use atres::tensor::Tensor;
use atres::train::{model_predictor, train};

#[derive(Parser)]
#[command(
    name = "atres",
    version,
    about = "CPU segmentation of stained-tissue images with a dilated-convolution U-Net"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset of tissue images and masks.
    Synth(SynthArgs),
    /// Train a model from a manifest of image/mask pairs.
    Train(TrainArgs),
    /// Predict probability and binary-mask PNGs for images.
    Predict(PredictArgs),
    /// Score predicted masks against ground-truth masks.
    Eval(EvalArgs),
    /// Finite-difference gradient checks over every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (will contain images/, masks/, manifest.txt).
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 40)]
    n: usize,
    /// Square image size in pixels (multiple of 8).
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (key=value lines); defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest listing `image mask` pairs.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints, logs, and split manifests.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Config overrides, e.g. --set epochs=30 --set variant=unet.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to predict with.
    #[arg(long, conflicts_with = "ensemble")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated checkpoints whose probability maps are averaged.
    #[arg(long, value_delimiter = ',')]
    ensemble: Vec<PathBuf>,
    /// Average predictions over the six flips/rotations of each image.
    #[arg(long)]
    self_ensemble: bool,
    /// Manifest whose first column lists the images to predict.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Image files (alternative to --manifest).
    images: Vec<PathBuf>,
    /// Output directory for <stem>_prob.png and <stem>_mask.png.
    #[arg(long, default_value = "pred")]
    out: PathBuf,
    /// Tile size for stitched inference.
    #[arg(long, default_value_t = 512)]
    tile: usize,
    /// Border fill outside the image: zero, white, or reflect.
    #[arg(long, default_value = "zero")]
    fill: String,
    /// Binarization threshold in (0,1).
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding <stem>_mask.png predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest of `image mask` pairs supplying the ground truth.
    #[arg(long)]
    manifest: PathBuf,
    /// Report file (defaults to <pred>/metrics.txt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds for each suite.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    start: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => {
            let manifest = generate_dataset(&a.out, a.n, a.size, a.seed)?;
            println!("wrote {} images; manifest at {}", a.n, manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for entry in &a.set {
        cfg.set(entry)?;
    }
    let outcome = train(&cfg, &a.manifest, &a.out)?;
    println!(
        "trained {} epochs; best val dice {:.4} at epoch {}; checkpoint {}",
        outcome.history.len(),
        outcome.best_val_dice,
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn worker_threads() -> usize {
    std::env::var("ATRES_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn cmd_predict(a: PredictArgs) -> Result<ExitCode> {
    let fill = Fill::parse(&a.fill)?;
    let ckpt_paths: Vec<PathBuf> = if !a.ensemble.is_empty() {
        a.ensemble.clone()
    } else if let Some(single) = &a.checkpoint {
        vec![single.clone()]
    } else {
        return Err(Error::InvalidArg(
            "predict needs --checkpoint or --ensemble".into(),
        ));
    };
    let mut images: Vec<PathBuf> = a.images.clone();
    if let Some(manifest) = &a.manifest {
        images.extend(read_manifest(manifest)?.into_iter().map(|(img, _)| img));
    }
    if images.is_empty() {
        return Err(Error::InvalidArg(
            "predict needs image arguments or --manifest".into(),
        ));
    }
    let models: Vec<Model> = ckpt_paths
        .iter()
        .map(|p| restore_model(&load_checkpoint(p)?))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_predict_meta(&a, &ckpt_paths, fill)?;

    let threads = worker_threads().min(images.len());
    let jobs: Vec<(usize, PathBuf)> = images.into_iter().enumerate().collect();
    let mut errors: Vec<Error> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let my_jobs: Vec<(usize, PathBuf)> = jobs
                .iter()
                .filter(|(i, _)| i % threads == t)
                .cloned()
                .collect();
            let mut my_models: Vec<Model> =
                models.iter().map(|m| m.clone_model()).collect();
            let out_dir = a.out.clone();
            let self_ens = a.self_ensemble;
            let (tile, threshold) = (a.tile, a.threshold);
            handles.push(scope.spawn(move || -> Result<Vec<String>> {
                let mut lines = Vec::new();
                for (_, img_path) in &my_jobs {
                    let stem = predict_one(
                        img_path,
                        &mut my_models,
                        tile,
                        fill,
                        threshold,
                        self_ens,
                        &out_dir,
                    )?;
                    lines.push(stem);
                }
                Ok(lines)
            }));
        }
        for h in handles {
            match h.join() {
                Ok(Ok(lines)) => {
                    for stem in lines {
                        println!("predicted {stem}");
                    }
                }
                Ok(Err(e)) => errors.push(e),
                Err(_) => errors.push(Error::InvalidArg("worker thread panicked".into())),
            }
        }
    });
    match errors.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(ExitCode::SUCCESS),
    }
}

/// Record how the maps were produced, including which transform set a
/// self-ensemble averaged over.
fn write_predict_meta(a: &PredictArgs, ckpts: &[PathBuf], fill: Fill) -> Result<()> {
    let mut text = String::new();
    let names: Vec<String> = ckpts.iter().map(|p| p.display().to_string()).collect();
    text.push_str(&format!("checkpoints={}\n", names.join(",")));
    text.push_str(&format!("tile={}\n", a.tile));
    text.push_str(&format!("fill={}\n", fill.as_str()));
    text.push_str(&format!("threshold={}\n", a.threshold));
    text.push_str(&format!(
        "self_ensemble={}\n",
        if a.self_ensemble { "on" } else { "off" }
    ));
    if a.self_ensemble {
        let ts: Vec<&str> = Transform::ALL.iter().map(|t| t.as_str()).collect();
        text.push_str(&format!("transforms={}\n", ts.join(",")));
    }
    let path = a.out.join("predict_meta.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn predict_one(
    img_path: &Path,
    models: &mut [Model],
    tile: usize,
    fill: Fill,
    threshold: f32,
    self_ens: bool,
    out_dir: &Path,
) -> Result<String> {
    let img = load_image_png(img_path)?;
    let mut maps: Vec<Tensor> = Vec::with_capacity(models.len());
    for model in models.iter_mut() {
        let mut predict = model_predictor(model);
        let map = if self_ens {
            self_ensemble(&img, tile, fill, &mut predict)?
        } else {
            predict_full(&img, tile, fill, &mut predict)?
        };
        maps.push(map);
    }
    let prob = if maps.len() == 1 {
        maps.pop().expect("one map")
    } else {
        model_ensemble(&maps)?
    };
    let mask = threshold_map(&prob, threshold)?;
    let stem = img_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArg(format!("bad image path {}", img_path.display())))?
        .to_string();
    save_prob_png(&prob, &out_dir.join(format!("{stem}_prob.png")))?;
    save_mask_png(&mask, &out_dir.join(format!("{stem}_mask.png")))?;
    let overlay = overlay_mask(&img, &mask)?;
    save_image_png(&overlay, &out_dir.join(format!("{stem}_overlay.png")))?;
    Ok(stem)
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let pairs = read_manifest(&a.manifest)?;
    if pairs.is_empty() {
        return Err(Error::Dataset("manifest lists no images".into()));
    }
    let mut report = String::new();
    report.push_str("per-image pixel metrics; summary is the macro average (undefined values skipped)\n");
    let mut dices = Vec::new();
    let mut accs = Vec::new();
    let mut sens = Vec::new();
    let mut spes = Vec::new();
    let mut pooled = ConfusionCounts::default();
    for (img_path, mask_path) in &pairs {
        let stem = img_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| {
                Error::InvalidArg(format!("bad image path {}", img_path.display()))
            })?;
        let pred_path = a.pred.join(format!("{stem}_mask.png"));
        let pred = load_mask_png(&pred_path)?;
        let truth = load_mask_png(mask_path)?;
        let c = confusion(&pred, &truth)?;
        let (d, ac, se, sp) = (
            dice_from_counts(&c),
            accuracy(&c),
            sensitivity(&c),
            specificity(&c),
        );
        report.push_str(&format!(
            "image={stem} dice={} acc={} sen={} spe={}\n",
            fmt_metric(d),
            fmt_metric(ac),
            fmt_metric(se),
            fmt_metric(sp)
        ));
        dices.push(d);
        accs.push(ac);
        sens.push(se);
        spes.push(sp);
        pooled.add(&c);
    }
    report.push_str(&format!(
        "summary images={} dice={} acc={} sen={} spe={}\n",
        pairs.len(),
        fmt_metric(macro_average(&dices)),
        fmt_metric(macro_average(&accs)),
        fmt_metric(macro_average(&sens)),
        fmt_metric(macro_average(&spes))
    ));
    report.push_str(&format!(
        "pooled-pixels dice={} acc={}\n",
        fmt_metric(dice_from_counts(&pooled)),
        fmt_metric(accuracy(&pooled))
    ));
    print!("{report}");
    let out = a.out.unwrap_or_else(|| a.pred.join("metrics.txt"));
    std::fs::write(&out, &report).map_err(|e| Error::io(&out, e))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.seeds == 0 {
        return Err(Error::InvalidArg("--seeds must be at least 1".into()));
    }
    let mut failed = false;

    let composite = run_suite(a.start, a.seeds, FD_EPSILON)?;
    let worst = composite
        .iter()
        .map(|r| r.worst())
        .fold(0.0f64, f64::max);
    let ok = worst < FD_TOLERANCE;
    failed |= !ok;
    println!(
        "composite micro-network: {} seeds, worst rel err {:.3e} -> {}",
        composite.len(),
        worst,
        if ok { "pass" } else { "FAIL" }
    );

    let mut per_op: BTreeMap<String, f64> = BTreeMap::new();
    for seed in a.start..a.start + a.seeds as u64 {
        for r in op_suite(seed)? {
            let e = per_op.entry(r.op).or_insert(0.0);
            *e = e.max(r.max_rel_err);
        }
    }
    for (op, worst) in &per_op {
        let ok = *worst < FD_TOLERANCE;
        failed |= !ok;
        println!(
            "{op}: {} seeds, worst rel err {worst:.3e} -> {}",
            a.seeds,
            if ok { "pass" } else { "FAIL" }
        );
    }

    if failed {
        eprintln!("gradient checks FAILED (tolerance {FD_TOLERANCE:.0e})");
        Ok(ExitCode::FAILURE)
    } else {
        println!("all gradient checks passed (tolerance {FD_TOLERANCE:.0e})");
        Ok(ExitCode::SUCCESS)
    }
}
