//! Deep-supervised adaptive pixel loss.
//!
//! Every side output is scored by a boundary-weighted binary cross-entropy
//! plus a weighted soft-IoU term, both under the same pixel weight map
//! `w = 1 + gain * |local_mean(gt) - gt|`: interior and far-background
//! pixels sit at weight 1, boundary bands get emphasized. The local mean is
//! count-adjusted at the borders so all-zero and all-one masks produce a
//! uniform weight of exactly 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Session;
use crate::tape::Var;
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Window side for the local-average pixel weights; odd.
    pub weight_kernel: usize,
    /// Boundary emphasis gain; weights live in `[1, 1 + gain]`.
    pub weight_gain: f64,
    pub use_weighted_bce: bool,
    pub use_weighted_iou: bool,
    /// Per-head multipliers; heads absent from the map weigh 1.0.
    pub supervision_weights: BTreeMap<String, f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weight_kernel: 31,
            weight_gain: 5.0,
            use_weighted_bce: true,
            use_weighted_iou: true,
            supervision_weights: BTreeMap::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "weight kernel must be odd, got {}",
                self.weight_kernel
            )));
        }
        if self.weight_gain < 0.0 {
            return Err(Error::Config("weight gain must be >= 0".into()));
        }
        if !self.use_weighted_bce && !self.use_weighted_iou {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }

    fn head_weight(&self, head: &str) -> f64 {
        self.supervision_weights.get(head).copied().unwrap_or(1.0)
    }
}

pub fn check_binary<E: Elem>(gt: &Tensor<E>) -> Result<()> {
    if gt.data().iter().all(|&v| v == E::ZERO || v == E::ONE) {
        Ok(())
    } else {
        Err(Error::Contract("ground-truth mask is not binary".into()))
    }
}

/// Boundary-emphasis pixel weights for a binary `(N, 1, S, S)` mask:
/// `w = 1 + gain * |local_mean(gt, kernel) - gt|`, the mean taken over the
/// in-bounds part of the window.
pub fn pixel_weights<E: Elem>(gt: &Tensor<E>, cfg: &LossConfig) -> Result<Tensor<E>> {
    cfg.validate()?;
    check_binary(gt)?;
    let (n, c, h, w) = gt.dims4();
    if c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "pixel weights expect a single-channel mask, got {c} channels"
        )));
    }
    let r = (cfg.weight_kernel - 1) / 2;
    let gain = cfg.weight_gain;
    let mut out = Tensor::zeros_like(gt);
    for i in 0..n {
        let plane = &gt.data()[i * h * w..(i + 1) * h * w];
        // Summed-area table with a zero row/column of padding.
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut run = 0.0;
            for x in 0..w {
                run += plane[y * w + x].to_f64();
                sat[(y + 1) * (w + 1) + (x + 1)] = sat[y * (w + 1) + (x + 1)] + run;
            }
        }
        let dst = &mut out.data_mut()[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            let y0 = y.saturating_sub(r);
            let y1 = (y + r + 1).min(h);
            for x in 0..w {
                let x0 = x.saturating_sub(r);
                let x1 = (x + r + 1).min(w);
                let total = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let mean = total / count;
                let g = plane[y * w + x].to_f64();
                dst[y * w + x] = E::from_f64(1.0 + gain * (mean - g).abs());
            }
        }
    }
    Ok(out)
}

/// Per-head loss values, recorded for logging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadLoss {
    pub head: String,
    pub weighted_bce: f64,
    pub weighted_iou: f64,
    /// Supervision-weighted contribution to the total.
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_head: Vec<HeadLoss>,
}

/// Build the deep-supervised loss over full-resolution head logits.
///
/// Heads are `(name, logit var)` pairs whose maps must already match the
/// ground truth resolution. Returns the scalar loss variable (for backward)
/// plus the per-head breakdown.
pub fn deep_supervised_loss<E: Elem>(
    s: &mut Session<E>,
    heads: &[(&str, Var)],
    gt: &Tensor<E>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if heads.is_empty() {
        return Err(Error::Contract("no prediction heads to supervise".into()));
    }
    check_binary(gt)?;
    for (name, z) in heads {
        if s.value(*z).shape() != gt.shape() {
            return Err(Error::ShapeMismatch(format!(
                "head {name} has shape {:?} but ground truth is {:?}",
                s.value(*z).shape(),
                gt.shape()
            )));
        }
    }
    let n = gt.shape()[0];
    let weights = pixel_weights(gt, cfg)?;
    let w = s.tape.constant(weights);
    let g = s.tape.constant(gt.clone());
    let w_sum = s.tape.sum_per_image(w);

    let mut total: Option<Var> = None;
    let mut per_head = Vec::with_capacity(heads.len());
    for (name, z) in heads {
        let mut head_terms: Option<Var> = None;
        let mut bce_value = 0.0;
        let mut iou_value = 0.0;

        if cfg.use_weighted_bce {
            let bce = s.tape.bce_with_logits(*z, gt);
            let weighted = s.tape.mul(bce, w);
            let num = s.tape.sum_per_image(weighted);
            let per_image = s.tape.div(num, w_sum);
            let mean = s.tape.mean_all(per_image);
            bce_value = s.value(mean).item().to_f64();
            head_terms = Some(mean);
        }
        if cfg.use_weighted_iou {
            let p = s.tape.sigmoid(*z);
            let pg = s.tape.mul(p, g);
            let pgw = s.tape.mul(pg, w);
            let inter = s.tape.sum_per_image(pgw);
            let p_plus_g = s.tape.add(p, g);
            let uw = s.tape.mul(p_plus_g, w);
            let union = s.tape.sum_per_image(uw);
            // 1 - (inter + 1) / (union - inter + 1)
            let num = s.tape.add_scalar(inter, E::ONE);
            let denom_raw = s.tape.sub(union, inter);
            let denom = s.tape.add_scalar(denom_raw, E::ONE);
            let frac = s.tape.div(num, denom);
            let neg = s.tape.scale(frac, -E::ONE);
            let iou_vec = s.tape.add_scalar(neg, E::ONE);
            let mean = s.tape.mean_all(iou_vec);
            iou_value = s.value(mean).item().to_f64();
            head_terms = Some(match head_terms {
                Some(t) => s.tape.add(t, mean),
                None => mean,
            });
        }

        let head_term = head_terms.expect("at least one term enabled");
        let hw = cfg.head_weight(name);
        let contribution = s.tape.scale(head_term, E::from_f64(hw));
        per_head.push(HeadLoss {
            head: (*name).to_string(),
            weighted_bce: bce_value,
            weighted_iou: iou_value,
            total: s.value(contribution).item().to_f64(),
        });
        total = Some(match total {
            Some(t) => s.tape.add(t, contribution),
            None => contribution,
        });
    }
    let _ = n;
    let total = total.expect("non-empty heads");
    let breakdown = LossBreakdown {
        total: s.value(total).item().to_f64(),
        per_head,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
            batch: None,
        });
    }
    Ok((total, breakdown))
}
