//! Integrity-aware polyp segmentation at desk scale.
//!
//! The crate implements a deeply supervised encoder-decoder segmentation
//! network built from three redistribution blocks (RFE, PFR, CPFR) plus a
//! coarse-to-fine calibration stage, together with its training loop,
//! evaluation metrics (Dice / IoU / MAE / FNR), integrity analysis, a
//! complexity profiler and a synthetic dataset generator. Everything runs on
//! CPU over an in-crate tensor/autodiff engine whose results are bit-exact
//! for any worker-thread count.

pub mod blocks;
pub mod cfc;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod profile;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use blocks::{Cpfr, Pfr, Rfe, RfeConfig, ScaleMode};
pub use cfc::{Cfc, CfcConfig};
pub use checkpoint::{load_checkpoint, peek_config, save_checkpoint};
pub use data::{load_dataset, multiscale_size, Dataset, Sample, SampleBatch};
pub use encoder::EncoderSpec;
pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_predictions, EvalOutcome};
pub use loss::{deep_supervised_loss, pixel_weights, LossBreakdown, LossConfig};
pub use metrics::{confusion, dice, fnr, integrity_report, iou, mae, ConfusionCounts};
pub use model::{build_model, ModelConfig, PolypSegNet, PredictionSet};
pub use params::{ParamStore, PId, Session};
pub use profile::profile;
pub use report::{EvalReport, EvalRow, Profile};
pub use rng::Rng;
pub use synth::{synth_generate, SynthConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Elem, Tensor};
pub use train::{ablate, train, TrainConfig, TrainOutcome};
