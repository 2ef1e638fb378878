//! Segmentation metrics: confusion counts, Dice / IoU / MAE / FNR, and the
//! macro/micro integrity analysis over connected components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::check_binary;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Binarize a probability map at `threshold` and count agreements against a
/// binary ground truth of the same shape.
pub fn confusion<E: Elem>(
    pred_prob: &Tensor<E>,
    gt: &Tensor<E>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Contract(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    if pred_prob.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred_prob.shape(),
            gt.shape()
        )));
    }
    check_binary(gt)?;
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &g) in pred_prob.data().iter().zip(gt.data()) {
        let p = p.to_f64() > threshold;
        let g = g == E::ONE;
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

// Empty-ground-truth rule for dice/iou: with no positive pixels anywhere
// (denominator 0) a clean prediction scores 1; any false positive keeps the
// denominator nonzero and scores 0 through the plain formula.

pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    2.0 * c.tp as f64 / denom as f64
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return 1.0;
    }
    c.tp as f64 / denom as f64
}

/// False negative ratio `fn / (tp + fn)`; an empty ground truth has nothing
/// to miss and scores 0.
pub fn fnr(c: &ConfusionCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        return 0.0;
    }
    c.fn_ as f64 / (c.tp + c.fn_) as f64
}

/// Mean absolute error over raw probabilities; no thresholding.
pub fn mae<E: Elem>(pred_prob: &Tensor<E>, gt: &Tensor<E>) -> Result<f64> {
    if pred_prob.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred_prob.shape(),
            gt.shape()
        )));
    }
    let sum: f64 = pred_prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p.to_f64() - g.to_f64()).abs())
        .sum();
    Ok(sum / pred_prob.numel() as f64)
}

// ---------------------------------------------------------------------------
// Connected components and integrity
// ---------------------------------------------------------------------------

/// Label the positive pixels of a binary `(H, W)` plane with 8-connectivity.
/// Returns (labels, component count); labels are 0 for background, 1-based
/// otherwise, assigned in scan order.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if mask[nidx] && labels[nidx] == 0 {
                        labels[nidx] = next;
                        stack.push(nidx);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Per-image integrity figures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageIntegrity {
    pub id: String,
    /// Ground-truth connected components.
    pub gt_components: usize,
    /// Components with zero predicted overlap (macro-level misses).
    pub macro_misses: usize,
    /// Mean `1 - covered/area` over components with nonzero overlap.
    pub micro_deficit: f64,
    pub fnr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub per_image: Vec<ImageIntegrity>,
    pub total_components: usize,
    pub total_macro_misses: usize,
    /// Missed components over all components.
    pub macro_miss_rate: f64,
    /// Mean micro deficit over every matched component in the dataset.
    pub micro_mean_deficit: f64,
    pub mean_fnr: f64,
}

fn to_bools<E: Elem>(t: &Tensor<E>) -> Vec<bool> {
    t.data().iter().map(|&v| v.to_f64() > 0.5).collect()
}

/// Macro/micro integrity over paired binary masks. Each tensor is a
/// single-image mask whose last two dims are spatial.
pub fn integrity_report<E: Elem>(
    preds: &[(String, Tensor<E>)],
    gts: &[Tensor<E>],
) -> Result<IntegrityReport> {
    if preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut per_image = Vec::with_capacity(preds.len());
    let mut total_components = 0;
    let mut total_misses = 0;
    let mut deficit_sum = 0.0;
    let mut matched = 0usize;
    let mut fnr_sum = 0.0;
    for ((id, pred), gt) in preds.iter().zip(gts) {
        check_binary(gt)?;
        let dims = gt.shape();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let gt_mask = to_bools(gt);
        let pred_mask = to_bools(pred);
        let (labels, count) = connected_components(&gt_mask, h, w);
        let mut area = vec![0u64; count];
        let mut covered = vec![0u64; count];
        for idx in 0..h * w {
            let label = labels[idx];
            if label == 0 {
                continue;
            }
            area[label as usize - 1] += 1;
            if pred_mask[idx] {
                covered[label as usize - 1] += 1;
            }
        }
        let mut misses = 0;
        let mut image_deficit = 0.0;
        let mut image_matched = 0;
        for k in 0..count {
            if covered[k] == 0 {
                misses += 1;
            } else {
                image_deficit += 1.0 - covered[k] as f64 / area[k] as f64;
                image_matched += 1;
            }
        }
        let c = confusion(pred, gt, 0.5)?;
        let image_fnr = fnr(&c);
        per_image.push(ImageIntegrity {
            id: id.clone(),
            gt_components: count,
            macro_misses: misses,
            micro_deficit: if image_matched > 0 {
                image_deficit / image_matched as f64
            } else {
                0.0
            },
            fnr: image_fnr,
        });
        total_components += count;
        total_misses += misses;
        deficit_sum += image_deficit;
        matched += image_matched;
        fnr_sum += image_fnr;
    }
    let n = preds.len().max(1);
    Ok(IntegrityReport {
        per_image,
        total_components,
        total_macro_misses: total_misses,
        macro_miss_rate: if total_components > 0 {
            total_misses as f64 / total_components as f64
        } else {
            0.0
        },
        micro_mean_deficit: if matched > 0 { deficit_sum / matched as f64 } else { 0.0 },
        mean_fnr: fnr_sum / n as f64,
    })
}
