//! Coarse-to-fine calibration: a plug-in residual encoder-decoder that
//! refines the coarse prediction map by learning residual logits.
//!
//! The encoder is four stages of 3x3 conv (32 filters) + norm + rectify,
//! each followed by non-overlapping 2x2 max pooling, so the spatial size
//! halves four times. The decoder mirrors the main network: an RFE on every
//! pooled encoder feature, pixel redistribution at the deepest stage, CPFR
//! fusion at the three shallower ones, and a zero-initialized 1x1 residual
//! head after the final x2 upsample. With the head at zero the refined map
//! equals the coarse map exactly.

use serde::{Deserialize, Serialize};

use crate::blocks::{Cpfr, Pfr, Rfe, RfeConfig, ScaleMode};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, ConvNormAct, GroupNormLayer};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Elem, Tensor};

pub const CFC_STAGES: usize = 4;
pub const CFC_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CfcConfig {
    /// Zero-initialize the residual head so refinement starts as identity.
    pub zero_init_residual_head: bool,
}

impl Default for CfcConfig {
    fn default() -> Self {
        CfcConfig {
            zero_init_residual_head: true,
        }
    }
}

pub struct Cfc {
    pub cfg: CfcConfig,
    enc: Vec<ConvNormAct>,
    rfe: Vec<Rfe>,
    pfr: Pfr,
    cpfr: Vec<Cpfr>,
    cond: Vec<GroupNormLayer>,
    res_head: Conv2dLayer,
}

impl Cfc {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        cfg: CfcConfig,
        pfr_scale: ScaleMode,
        cpfr_scale: ScaleMode,
    ) -> Result<Self> {
        let mut enc = Vec::with_capacity(CFC_STAGES);
        let mut in_ch = 1;
        for i in 0..CFC_STAGES {
            enc.push(ConvNormAct::init(
                store,
                rng,
                &format!("{path}.enc{}", i + 1),
                in_ch,
                CFC_WIDTH,
                (3, 3),
                1,
                true,
            ));
            in_ch = CFC_WIDTH;
        }
        let mut rfe = Vec::with_capacity(CFC_STAGES);
        for i in 0..CFC_STAGES {
            rfe.push(Rfe::init(
                store,
                rng,
                &format!("{path}.rfe{}", i + 1),
                RfeConfig::new(CFC_WIDTH, CFC_WIDTH),
            )?);
        }
        let pfr = Pfr::init(store, rng, &format!("{path}.pfr"), CFC_WIDTH, pfr_scale);
        let cpfr = (1..CFC_STAGES)
            .map(|i| Cpfr::init(store, rng, &format!("{path}.cpfr{i}"), CFC_WIDTH, cpfr_scale))
            .collect();
        let cond = (0..CFC_STAGES)
            .map(|i| GroupNormLayer::init(store, &format!("{path}.cond{}", i + 1), CFC_WIDTH))
            .collect();
        let res_head = if cfg.zero_init_residual_head {
            Conv2dLayer::init_zero(store, &format!("{path}.res_head"), CFC_WIDTH, 1, (1, 1))
        } else {
            Conv2dLayer::init(store, rng, &format!("{path}.res_head"), CFC_WIDTH, 1, (1, 1), 1)
        };
        Ok(Cfc {
            cfg,
            enc,
            rfe,
            pfr,
            cpfr,
            cond,
            res_head,
        })
    }

    /// Residual logits for a `(N, 1, S, S)` coarse logit map, same shape.
    pub fn forward_residual<E: Elem>(&self, s: &mut Session<E>, coarse: Var) -> Result<Var> {
        let (_, c, h, w) = s.value(coarse).dims4();
        if c != 1 {
            return Err(Error::Contract(format!(
                "cfc expects a single-channel coarse map, got {c} channels"
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Contract(format!(
                "cfc input spatial size must be divisible by 16, got {h}x{w}"
            )));
        }
        // Encoder: conv at full size, pool, conv, pool, ... four times.
        let mut pooled = Vec::with_capacity(CFC_STAGES);
        let mut x = coarse;
        for stage in &self.enc {
            x = stage.forward(s, x);
            x = s.tape.max_pool2(x);
            pooled.push(x);
        }
        // Receptive-field expansion on every pooled feature.
        let mut expanded = Vec::with_capacity(CFC_STAGES);
        for (feat, rfe) in pooled.iter().zip(&self.rfe) {
            expanded.push(rfe.forward(s, *feat)?);
        }
        // Decoder: redistribution at the deepest stage, cross-stage fusion on
        // the way up, each stage conditioned then x2 upsampled.
        let deepest = self.pfr.forward(s, expanded[CFC_STAGES - 1])?;
        let mut d = self.cond[CFC_STAGES - 1].forward(s, deepest);
        for i in (0..CFC_STAGES - 1).rev() {
            let (_, _, dh, dw) = s.value(d).dims4();
            let up = s.tape.upsample_bilinear(d, dh * 2, dw * 2);
            let fused = self.cpfr[i].forward(s, expanded[i], up)?;
            d = self.cond[i].forward(s, fused);
        }
        let (_, _, dh, dw) = s.value(d).dims4();
        let restored = s.tape.upsample_bilinear(d, dh * 2, dw * 2);
        Ok(self.res_head.forward(s, restored))
    }

    /// The refinement operator: `sigmoid(coarse + residual)`.
    pub fn apply<E: Elem>(&self, store: &ParamStore<E>, coarse: &Tensor<E>) -> Result<Tensor<E>> {
        let mut s = Session::eval(store, 1);
        let c = s.tape.leaf(coarse.clone(), false);
        let res = self.forward_residual(&mut s, c)?;
        let refined = s.tape.add(c, res);
        let prob = s.tape.sigmoid(refined);
        Ok(s.value(prob).clone())
    }

    pub fn param_count(&self) -> u64 {
        let enc: u64 = self.enc.iter().map(|e| e.param_count()).sum();
        let rfe: u64 = self.rfe.iter().map(|r| r.param_count()).sum();
        let cpfr: u64 = self.cpfr.iter().map(|c| c.param_count()).sum();
        let cond = (2 * CFC_WIDTH * CFC_STAGES) as u64;
        enc + rfe + self.pfr.param_count() + cpfr + cond + self.res_head.param_count()
    }

    /// MACs for a square coarse map of side `s`.
    pub fn macs(&self, s: usize) -> u64 {
        let mut total = 0;
        let mut side = s;
        for stage in &self.enc {
            total += stage.macs(side, side);
            side /= 2;
        }
        // side now s/16; rfe/cpfr sides mirror the pooled pyramid
        let mut sides = [0usize; CFC_STAGES];
        let mut cur = s;
        for slot in sides.iter_mut() {
            cur /= 2;
            *slot = cur;
        }
        for (i, rfe) in self.rfe.iter().enumerate() {
            total += rfe.macs(sides[i], sides[i]);
        }
        total += self.pfr.macs(sides[CFC_STAGES - 1], sides[CFC_STAGES - 1]);
        for (i, cpfr) in self.cpfr.iter().enumerate() {
            total += cpfr.macs(sides[i], sides[i]);
        }
        total += self.res_head.macs(s, s);
        total
    }
}
