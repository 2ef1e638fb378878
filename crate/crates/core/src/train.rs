//! Training loop: seeded shuffling, multi-scale batch sizing, AdamW with
//! decoupled weight decay, per-epoch validation with early stopping, and the
//! four-configuration ablation runner.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_json};
use crate::data::{multiscale_size, resize_batch, Dataset, MULTI_SCALE_RATIOS};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::loss::{deep_supervised_loss, LossConfig};
use crate::model::{build_model, ModelConfig, PolypSegNet};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::Session;
use crate::report::{EvalReport, EvalRow};
use crate::rng::Rng;
use crate::tensor::Elem;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without a validation-loss
    /// improvement.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    /// Apply the desk-scale preset (batch 4, 96 px canvas, 30 epochs).
    pub desk_preset: bool,
    pub multi_scale: Vec<f64>,
    pub grad_clip: Option<f64>,
    /// Worker threads for batch-sharded compute; results do not depend on
    /// this value.
    pub threads: usize,
    /// Force single-threaded compute.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            desk_preset: false,
            multi_scale: MULTI_SCALE_RATIOS.to_vec(),
            grad_clip: None,
            threads: 1,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        let mut cfg = TrainConfig {
            desk_preset: true,
            ..Default::default()
        };
        cfg.apply_desk_preset();
        cfg
    }

    /// Overwrite the scale-sensitive fields with the desk values.
    pub fn apply_desk_preset(&mut self) {
        self.desk_preset = true;
        self.batch_size = 4;
        self.max_epochs = 30;
        self.model.input_size = 96;
    }

    pub fn effective_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.lr < 0.0 {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be positive".into()));
        }
        if self.early_stop_patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be smaller than max epochs {}",
                self.early_stop_patience, self.max_epochs
            )));
        }
        if self.multi_scale.is_empty() {
            return Err(Error::Config("multi-scale ratio list is empty".into()));
        }
        Ok(())
    }
}

/// Early stopping on strict validation-loss decrease.
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Feed one validation loss; returns `(improved, stop_now)`. The stop
    /// fires at exactly the epoch that exhausts the patience.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean per-head validation contribution.
    pub per_head: std::collections::BTreeMap<String, f64>,
    pub lr: f64,
    /// Seconds spent in this epoch.
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub config_path: PathBuf,
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

fn batched_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Mean validation loss (and per-head means) over a dataset.
fn validation_loss<E: Elem>(
    model: &PolypSegNet<E>,
    dataset: &Dataset<E>,
    cfg: &TrainConfig,
) -> Result<(f64, std::collections::BTreeMap<String, f64>)> {
    let order: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    let mut per_head = std::collections::BTreeMap::<String, f64>::new();
    let batches = batched_indices(&order, cfg.batch_size);
    for indices in &batches {
        let batch = dataset.gather(indices);
        let mut sess = Session::eval(model.store(), cfg.effective_threads());
        let pass = model.forward(&mut sess, &batch.images)?;
        let heads = pass.logits.iter();
        let (_, breakdown) = deep_supervised_loss(&mut sess, &heads, &batch.masks, &cfg.loss)?;
        total += breakdown.total;
        for head in &breakdown.per_head {
            *per_head.entry(head.head.clone()).or_insert(0.0) += head.total;
        }
    }
    let n = batches.len() as f64;
    for v in per_head.values_mut() {
        *v /= n;
    }
    Ok((total / n, per_head))
}

/// Train a model on `train_set`, early-stopping on `val_set`, writing the
/// best/last checkpoints, an NDJSON epoch log and the resolved config under
/// `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset<f32>,
    val_set: &Dataset<f32>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let side = train_set.samples[0].image.shape()[1];
    if side != cfg.model.input_size {
        return Err(Error::Contract(format!(
            "dataset loaded at {side} px but the model expects {} px",
            cfg.model.input_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("train_config.json");
    write_json(cfg, &config_path)?;
    let log_path = out_dir.join("train_log.ndjson");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let best_checkpoint = out_dir.join("checkpoint_best.ckpt");
    let last_checkpoint = out_dir.join("checkpoint_last.ckpt");

    let mut model = build_model::<f32>(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(model.store(), cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = Rng::stream(cfg.seed, 1);
    let mut scale_rng = Rng::stream(cfg.seed, 2);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let threads = cfg.effective_threads();

    let mut history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut train_loss_sum = 0.0;
        let mut steps = 0usize;
        for indices in batched_indices(&order, cfg.batch_size) {
            let ratio = cfg.multi_scale[scale_rng.below(cfg.multi_scale.len())];
            let scaled = multiscale_size(cfg.model.input_size, ratio)?;
            let batch = train_set.gather(&indices);
            let batch = resize_batch(&batch, scaled);

            let mut sess = Session::new(model.store(), threads);
            // Any non-finite value mid-step means the run diverged; the
            // checkpoints written so far stay on disk.
            let diverged = |e: Error| match e {
                Error::NonFinite { context, .. } => Error::Divergence(format!(
                    "non-finite values in {context} at epoch {epoch}; last good checkpoint kept at {}",
                    last_checkpoint.display()
                )),
                other => other,
            };
            let pass = model.forward(&mut sess, &batch.images).map_err(diverged)?;
            let heads = pass.logits.iter();
            let (loss_var, breakdown) =
                deep_supervised_loss(&mut sess, &heads, &batch.masks, &cfg.loss)
                    .map_err(diverged)?;
            train_loss_sum += breakdown.total;
            steps += 1;

            let mut grads = sess.tape.backward(loss_var);
            let mut param_grads = sess.parameter_gradients(&mut grads);
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut param_grads, max_norm);
            }
            drop(sess);
            opt.step(model.store_mut(), &param_grads);
        }
        let train_loss = train_loss_sum / steps.max(1) as f64;

        let (val_loss, per_head) = validation_loss(&model, val_set, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite validation loss at epoch {epoch}; last good checkpoint kept at {}",
                last_checkpoint.display()
            )));
        }
        epochs_run = epoch;
        let (improved, stop) = stopper.observe(val_loss);
        save_checkpoint(&model, &last_checkpoint)?;
        if improved {
            save_checkpoint(&model, &best_checkpoint)?;
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            per_head,
            lr: cfg.lr,
            wall_time: epoch_start.elapsed().as_secs_f64(),
        };
        let line = serde_json::to_string(&record)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        history.push(record);

        if stop {
            break;
        }
    }

    Ok(TrainOutcome {
        best_checkpoint,
        last_checkpoint,
        log_path,
        config_path,
        epochs_run,
        best_val_loss: stopper.best(),
        history,
    })
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

pub const ABLATION_LABELS: [&str; 4] =
    ["Baseline", "+ PFR", "+ PFR + CPFR", "+ PFR + CPFR + CFC"];

/// The four component settings in table order, as (label, slug, toggles).
pub fn ablation_configs(base: &ModelConfig) -> Vec<(String, String, ModelConfig)> {
    let toggles = [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, true, true),
    ];
    ABLATION_LABELS
        .iter()
        .zip(toggles)
        .map(|(&label, (pfr, cpfr, cfc))| {
            let cfg = ModelConfig {
                use_pfr: pfr,
                use_cpfr: cpfr,
                use_cfc: cfc,
                ..base.clone()
            };
            let slug = label
                .to_lowercase()
                .replace("+ ", "")
                .replace(' ', "_");
            (label.to_string(), slug, cfg)
        })
        .collect()
}

pub struct AblationOutcome {
    /// One evaluation row per component setting, in table order.
    pub report: EvalReport,
    pub run_dirs: Vec<PathBuf>,
    /// Parameter-name sets per setting, for toggle verification.
    pub param_names: Vec<Vec<String>>,
}

/// Train and evaluate the four component settings with identical seeds and
/// data, emitting a combined table under `out_dir`.
pub fn ablate(
    cfg: &TrainConfig,
    train_set: &Dataset<f32>,
    val_set: &Dataset<f32>,
    out_dir: &Path,
    threshold: f64,
) -> Result<AblationOutcome> {
    let mut rows: Vec<EvalRow> = Vec::with_capacity(4);
    let mut run_dirs = Vec::with_capacity(4);
    let mut param_names = Vec::with_capacity(4);
    for (label, slug, model_cfg) in ablation_configs(&cfg.model) {
        let run_cfg = TrainConfig {
            model: model_cfg,
            ..cfg.clone()
        };
        let run_dir = out_dir.join(&slug);
        let outcome = train(&run_cfg, train_set, val_set, &run_dir)?;
        let model = load_checkpoint::<f32>(&outcome.best_checkpoint)?;
        param_names.push(model.param_names());
        let eval = evaluate(&model, val_set, threshold, &label, cfg.effective_threads())?;
        let mut row = eval.report.rows[0].clone();
        row.model = label;
        rows.push(row);
        run_dirs.push(run_dir);
    }
    let report = EvalReport {
        threshold,
        rows,
        profile: None,
    };
    report.write(&out_dir.join("ablation.json"), &out_dir.join("ablation.csv"))?;
    Ok(AblationOutcome {
        report,
        run_dirs,
        param_names,
    })
}
