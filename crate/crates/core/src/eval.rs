//! Dataset-level evaluation: per-image metrics on the final prediction map,
//! averaged arithmetically, plus the integrity analysis.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{confusion, dice, fnr, integrity_report, iou, mae, IntegrityReport};
use crate::model::PolypSegNet;
use crate::report::{EvalReport, EvalRow};
use crate::tensor::{Elem, Tensor};

pub struct EvalOutcome<E: Elem> {
    pub report: EvalReport,
    pub integrity: IntegrityReport,
    /// `(id, probability map)` per sample, in dataset order.
    pub predictions: Vec<(String, Tensor<E>)>,
}

/// Evaluate a model over a dataset at one binarization threshold. Metrics
/// are computed per image on the refined map (p2 when calibration is off)
/// and averaged arithmetically; iteration order is the dataset order.
pub fn evaluate<E: Elem>(
    model: &PolypSegNet<E>,
    dataset: &Dataset<E>,
    threshold: f64,
    model_name: &str,
    threads: usize,
) -> Result<EvalOutcome<E>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut predictions = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let s = sample.image.shape()[1];
        let image = Tensor::new(&[1, 3, s, s], sample.image.data().to_vec());
        let preds = model.predict(&image, threads)?;
        predictions.push((sample.id.clone(), preds.final_map().clone()));
    }
    evaluate_predictions(&predictions, dataset, threshold, model_name)
}

/// Metrics for precomputed probability maps (same shapes as the dataset
/// masks). Shared by in-process evaluation and the CLI's re-fed mode.
pub fn evaluate_predictions<E: Elem>(
    predictions: &[(String, Tensor<E>)],
    dataset: &Dataset<E>,
    threshold: f64,
    model_name: &str,
) -> Result<EvalOutcome<E>> {
    if predictions.len() != dataset.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} samples",
            predictions.len(),
            dataset.len()
        )));
    }
    let n = dataset.len() as f64;
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut binarized = Vec::with_capacity(predictions.len());
    for ((id, prob), sample) in predictions.iter().zip(&dataset.samples) {
        if sample.id != *id {
            return Err(Error::Dataset(format!(
                "prediction {id} paired with sample {}",
                sample.id
            )));
        }
        let gt = reshape_mask(&sample.mask);
        let prob = reshape_mask(prob);
        let c = confusion(&prob, &gt, threshold)?;
        sums.0 += dice(&c);
        sums.1 += iou(&c);
        sums.2 += mae(&prob, &gt)?;
        sums.3 += fnr(&c);
        binarized.push((
            id.clone(),
            prob.map(|v| if v.to_f64() > threshold { E::ONE } else { E::ZERO }),
        ));
    }
    let masks: Vec<Tensor<E>> = dataset
        .samples
        .iter()
        .map(|s| reshape_mask(&s.mask))
        .collect();
    let integrity = integrity_report(&binarized, &masks)?;
    let report = EvalReport {
        threshold,
        rows: vec![EvalRow {
            dataset: dataset.name.clone(),
            model: model_name.to_string(),
            m_dice: sums.0 / n,
            m_iou: sums.1 / n,
            mae: sums.2 / n,
            fnr: sums.3 / n,
        }],
        profile: None,
    };
    Ok(EvalOutcome {
        report,
        integrity,
        predictions: predictions.to_vec(),
    })
}

/// Normalize `(1, S, S)` / `(1, 1, S, S)` mask shapes to `(1, S, S)`.
fn reshape_mask<E: Elem>(t: &Tensor<E>) -> Tensor<E> {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    Tensor::new(&[1, h, w], t.data().to_vec())
}
