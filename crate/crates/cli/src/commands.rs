use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use polypseg_core::checkpoint::{load_checkpoint, peek_config};
use polypseg_core::data::{load_dataset, split_dataset, split_dir, Dataset};
use polypseg_core::eval::{evaluate, evaluate_predictions};
use polypseg_core::model::{build_model, ModelConfig, PolypSegNet};
use polypseg_core::report::integrity_csv;
use polypseg_core::synth::{synth_generate, SynthConfig};
use polypseg_core::tensor::Tensor;
use polypseg_core::train::TrainConfig;

use crate::manifest::ManifestBuilder;

pub const DATA_ROOT_ENV: &str = "POLYPSEG_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "polypseg",
    version,
    about = "Integrity-aware polyp segmentation: data generation, training, \
             evaluation, prediction, ablation and profiling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic blob dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or saved predictions) against a dataset.
    Eval(EvalArgs),
    /// Write per-image probability maps and binarized masks.
    Predict(PredictArgs),
    /// Train and evaluate the four component settings.
    Ablate(AblateArgs),
    /// Report parameter count, MACs and measured FPS.
    Profile(ProfileArgs),
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var(DATA_ROOT_ENV) {
        return Ok(PathBuf::from(env));
    }
    bail!("no --data given and {DATA_ROOT_ENV} is unset")
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory (receives images/, masks/, synth_config.json).
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a SynthConfig; flags override its leaves.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    blobs_min: Option<usize>,
    #[arg(long)]
    blobs_max: Option<usize>,
    #[arg(long)]
    radius_min: Option<f64>,
    #[arg(long)]
    radius_max: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = args.count {
        cfg.count = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.canvas {
        cfg.canvas = v;
    }
    if let Some(v) = args.blobs_min {
        cfg.blob_count_range[0] = v;
    }
    if let Some(v) = args.blobs_max {
        cfg.blob_count_range[1] = v;
    }
    if let Some(v) = args.radius_min {
        cfg.blob_radius_range[0] = v;
    }
    if let Some(v) = args.radius_max {
        cfg.blob_radius_range[1] = v;
    }
    if let Some(v) = args.jitter {
        cfg.boundary_jitter = v;
    }
    if let Some(v) = args.noise {
        cfg.texture_noise = v;
    }
    synth_generate(&cfg, &args.out)?;
    let mut manifest = ManifestBuilder::new("gen-data");
    manifest
        .config(&cfg)?
        .seed(cfg.seed)
        .output("dataset", &args.out)
        .artifact(args.out.join("images"))
        .artifact(args.out.join("masks"))
        .artifact(args.out.join("synth_config.json"));
    let path = manifest.write(&args.out)?;
    println!(
        "generated {} samples under {} (manifest {})",
        cfg.count,
        args.out.display(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset root (falls back to POLYPSEG_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a TrainConfig; flags override its leaves.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Desk-scale preset: batch 4, 96 px canvas, 30 epochs.
    #[arg(long)]
    desk_preset: bool,
    /// Force single-threaded compute.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Split directory used for training.
    #[arg(long, default_value = "train")]
    train_split: String,
    /// Split directory used for validation; when missing, a seeded 90/10
    /// split of the training set is used.
    #[arg(long, default_value = "val")]
    val_split: String,
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => read_config(path)?,
        None => TrainConfig::default(),
    };
    if args.desk_preset {
        cfg.apply_desk_preset();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.input_size {
        cfg.model.input_size = v;
    }
    if let Some(v) = args.threads {
        cfg.threads = v;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(v) = args.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = args.grad_clip {
        cfg.grad_clip = Some(v);
    }
    Ok(cfg)
}

fn load_train_val(
    root: &Path,
    train_split: &str,
    val_split: &str,
    size: usize,
    seed: u64,
) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let train_set = load_dataset::<f32>(root, train_split, size)?;
    if split_dir(root, val_split).join("images").is_dir() {
        let val_set = load_dataset::<f32>(root, val_split, size)?;
        Ok((train_set, val_set))
    } else {
        // No explicit validation split: carve one out deterministically.
        Ok(split_dataset(train_set, 0.1, seed)?)
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    let root = data_root(args.data.clone())?;
    let (train_set, val_set) = load_train_val(
        &root,
        &args.train_split,
        &args.val_split,
        cfg.model.input_size,
        cfg.seed,
    )?;
    println!(
        "training on {} samples, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let outcome = polypseg_core::train::train(&cfg, &train_set, &val_set, &args.out)?;
    let mut manifest = ManifestBuilder::new("train");
    manifest
        .config(&cfg)?
        .seed(cfg.seed)
        .input("data", &root)
        .output("best_checkpoint", &outcome.best_checkpoint)
        .output("last_checkpoint", &outcome.last_checkpoint)
        .output("log", &outcome.log_path)
        .artifact(&outcome.best_checkpoint)
        .artifact(&outcome.last_checkpoint)
        .artifact(&outcome.config_path);
    let path = manifest.write(&args.out)?;
    println!(
        "trained {} epochs (best val loss {:.4}); checkpoint {} (manifest {})",
        outcome.epochs_run,
        outcome.best_val_loss,
        outcome.best_checkpoint.display(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of saved prediction maps to evaluate instead of a model.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split under the data root; empty string reads the root directly.
    #[arg(long, default_value = "")]
    split: String,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    deterministic: bool,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let root = data_root(args.data.clone())?;
    let threads = if args.deterministic {
        1
    } else {
        args.threads.unwrap_or(1)
    };
    let mut manifest = ManifestBuilder::new("eval");
    manifest.input("data", &root);

    let outcome = if let Some(pred_dir) = &args.pred {
        // Re-feed saved predictions: a predict output directory (prob/
        // preferred over mask/) or a flat directory of PNG maps.
        let maps_dir = if pred_dir.join("prob").is_dir() {
            pred_dir.join("prob")
        } else if pred_dir.join("mask").is_dir() {
            pred_dir.join("mask")
        } else {
            pred_dir.clone()
        };
        manifest.input("predictions", &maps_dir);
        let probe = first_png(&maps_dir)?;
        let sample_map = polypseg_core::data::load_probability_map::<f32>(&probe)?;
        let size = sample_map.shape()[1];
        let dataset = load_dataset::<f32>(&root, &args.split, size)?;
        let mut predictions = Vec::with_capacity(dataset.len());
        for sample in &dataset.samples {
            let path = maps_dir.join(format!("{}.png", sample.id));
            let map = polypseg_core::data::load_probability_map::<f32>(&path)?;
            predictions.push((sample.id.clone(), map));
        }
        evaluate_predictions(&predictions, &dataset, args.threshold, "saved-predictions")?
    } else {
        let ckpt = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| anyhow!("eval needs --checkpoint or --pred"))?;
        manifest.input("checkpoint", ckpt);
        let model = load_checkpoint::<f32>(ckpt)?;
        let size = args.input_size.unwrap_or(model.cfg.input_size);
        let dataset = load_dataset::<f32>(&root, &args.split, size)?;
        let name = ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        evaluate(&model, &dataset, args.threshold, &name, threads)?
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let json_path = args.out.join("eval.json");
    let csv_path = args.out.join("eval.csv");
    outcome.report.write(&json_path, &csv_path)?;
    let integrity_path = args.out.join("integrity.csv");
    std::fs::write(&integrity_path, integrity_csv(&outcome.integrity))
        .with_context(|| format!("writing {}", integrity_path.display()))?;

    manifest
        .config(&outcome.report)?
        .output("report_json", &json_path)
        .output("report_csv", &csv_path)
        .output("integrity_csv", &integrity_path)
        .artifact(&json_path)
        .artifact(&csv_path)
        .artifact(&integrity_path);
    let path = manifest.write(&args.out)?;
    print!("{}", outcome.report.to_csv());
    println!("(manifest {})", path.display());
    Ok(())
}

fn first_png(dir: &Path) -> Result<PathBuf> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    entries.sort();
    entries
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("no PNG files under {}", dir.display()))
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    deterministic: bool,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let root = data_root(args.data.clone())?;
    let threads = if args.deterministic {
        1
    } else {
        args.threads.unwrap_or(1)
    };
    let model = load_checkpoint::<f32>(&args.checkpoint)?;
    let dataset = load_dataset::<f32>(&root, &args.split, model.cfg.input_size)?;
    let prob_dir = args.out.join("prob");
    let mask_dir = args.out.join("mask");
    std::fs::create_dir_all(&prob_dir)
        .with_context(|| format!("creating {}", prob_dir.display()))?;
    std::fs::create_dir_all(&mask_dir)
        .with_context(|| format!("creating {}", mask_dir.display()))?;
    for sample in &dataset.samples {
        let s = sample.image.shape()[1];
        let image = Tensor::new(&[1, 3, s, s], sample.image.data().to_vec());
        let preds = model.predict(&image, threads)?;
        let prob = preds.final_map();
        polypseg_core::data::save_probability_map(
            prob,
            &prob_dir.join(format!("{}.png", sample.id)),
        )?;
        let mask = prob.map(|v| if v as f64 > args.threshold { 1.0 } else { 0.0 });
        polypseg_core::data::save_mask(&mask, &mask_dir.join(format!("{}.png", sample.id)))?;
    }
    let mut manifest = ManifestBuilder::new("predict");
    manifest
        .config(&model.cfg)?
        .input("checkpoint", &args.checkpoint)
        .input("data", &root)
        .output("probability_maps", &prob_dir)
        .output("masks", &mask_dir)
        .artifact(&prob_dir)
        .artifact(&mask_dir);
    let path = manifest.write(&args.out)?;
    println!(
        "wrote {} probability/mask pairs under {} (manifest {})",
        dataset.len(),
        args.out.display(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve_train_config(&args.train)?;
    let root = data_root(args.train.data.clone())?;
    let (train_set, val_set) = load_train_val(
        &root,
        &args.train.train_split,
        &args.train.val_split,
        cfg.model.input_size,
        cfg.seed,
    )?;
    let outcome =
        polypseg_core::train::ablate(&cfg, &train_set, &val_set, &args.train.out, args.threshold)?;
    let mut manifest = ManifestBuilder::new("ablate");
    manifest
        .config(&cfg)?
        .seed(cfg.seed)
        .input("data", &root)
        .output("table_json", args.train.out.join("ablation.json"))
        .output("table_csv", args.train.out.join("ablation.csv"))
        .artifact(args.train.out.join("ablation.json"))
        .artifact(args.train.out.join("ablation.csv"));
    let path = manifest.write(&args.train.out)?;
    print!("{}", outcome.report.to_csv());
    println!("(manifest {})", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// profile
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ProfileArgs {
    /// Profile the model stored in this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Or build a fresh model from this ModelConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Or profile the desk-preset model.
    #[arg(long)]
    desk_preset: bool,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn profile(args: ProfileArgs) -> Result<()> {
    let seed = args.seed.unwrap_or(0);
    let (model, source): (PolypSegNet<f32>, String) = if let Some(ckpt) = &args.checkpoint {
        let _ = peek_config(ckpt)?; // fail early with a format error if bogus
        (load_checkpoint(ckpt)?, ckpt.display().to_string())
    } else if let Some(cfg_path) = &args.config {
        let cfg: ModelConfig = read_config(cfg_path)?;
        (build_model(cfg, seed)?, cfg_path.display().to_string())
    } else if args.desk_preset {
        (build_model(ModelConfig::desk(), seed)?, "desk preset".into())
    } else {
        bail!("profile needs --checkpoint, --config or --desk-preset");
    };
    let input_size = args.input_size.unwrap_or(model.cfg.input_size);
    let profile = polypseg_core::profile::profile(&model, input_size)?;
    let (params_m, macs_g, fps) = profile.table_units();
    println!(
        "model: {source}\nParams(M): {params_m:.3}\nMACs(G) @ {input_size}px: {macs_g:.3}\nFPS: {fps:.1}\nhardware: {}",
        profile.hardware
    );
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let json_path = args.out.join("profile.json");
    polypseg_core::checkpoint::write_json(&profile, &json_path)?;
    let mut manifest = ManifestBuilder::new("profile");
    manifest
        .config(&profile)?
        .output("profile_json", &json_path)
        .artifact(&json_path);
    let path = manifest.write(&args.out)?;
    println!("(manifest {})", path.display());
    Ok(())
}
