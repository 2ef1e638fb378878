//! The full segmentation network: encoder, RFE bank, redistribution decoder,
//! deep-supervision heads and optional coarse-to-fine calibration.
//!
//! Decoder pipeline: the encoder's four deepest pyramid features (stage 1 is
//! skipped for its size) each pass an RFE to decoder width C; the deepest is
//! redistributed by PFR; walking up, the deeper stage output is x2 bilinear
//! upsampled and fused with the same-stage RFE output by CPFR (or by a plain
//! concat + 1x1 conv when CPFR is toggled off). Every stage output is
//! conditioned by a group norm before heads and upsampling consume it, which
//! keeps the cascade of global redistribution scalars magnitude-stable. A
//! 1x1 head per stage emits logits, bilinearly upsampled to the input size;
//! the refined map is `sigmoid(p2_logits + residual)` when calibration is on.

use serde::{Deserialize, Serialize};

use crate::blocks::{Cpfr, Pfr, Rfe, RfeConfig, ScaleMode};
use crate::cfc::{Cfc, CfcConfig};
use crate::encoder::{ConvEncoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, GroupNormLayer};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Elem, Tensor};

/// Decoder stages, deep to shallow, as encoder-stage indices.
const DECODER_STAGES: [usize; 4] = [5, 4, 3, 2];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    /// Decoder width C shared by every block.
    pub decoder_width: usize,
    /// Default (and evaluation) input side in pixels; must divide by 32.
    pub input_size: usize,
    pub use_pfr: bool,
    pub use_cpfr: bool,
    pub use_cfc: bool,
    pub pfr_scale_mode: ScaleMode,
    pub cpfr_scale_mode: ScaleMode,
    pub cfc: CfcConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderSpec::default(),
            decoder_width: 32,
            input_size: 352,
            use_pfr: true,
            use_cpfr: true,
            use_cfc: true,
            pfr_scale_mode: ScaleMode::Raw,
            cpfr_scale_mode: ScaleMode::Raw,
            cfc: CfcConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 96 px inputs over the tiny conv encoder.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 96,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Side outputs p5..p2 plus the refined p1, all `(N, 1, S, S)` probability
/// maps at full input resolution. p1 is present iff calibration is enabled.
#[derive(Clone, Debug)]
pub struct PredictionSet<E: Elem> {
    pub p5: Tensor<E>,
    pub p4: Tensor<E>,
    pub p3: Tensor<E>,
    pub p2: Tensor<E>,
    pub p1: Option<Tensor<E>>,
}

impl<E: Elem> PredictionSet<E> {
    /// The map used for inference: the refined p1 when present, else p2.
    pub fn final_map(&self) -> &Tensor<E> {
        self.p1.as_ref().unwrap_or(&self.p2)
    }

    pub fn heads(&self) -> Vec<(&'static str, &Tensor<E>)> {
        let mut v = vec![
            ("p5", &self.p5),
            ("p4", &self.p4),
            ("p3", &self.p3),
            ("p2", &self.p2),
        ];
        if let Some(p1) = &self.p1 {
            v.push(("p1", p1));
        }
        v
    }
}

/// Full-resolution logit vars per head, for the loss.
pub struct HeadLogits {
    pub p5: Var,
    pub p4: Var,
    pub p3: Var,
    pub p2: Var,
    pub p1: Option<Var>,
}

impl HeadLogits {
    pub fn iter(&self) -> Vec<(&'static str, Var)> {
        let mut v = vec![("p5", self.p5), ("p4", self.p4), ("p3", self.p3), ("p2", self.p2)];
        if let Some(p1) = self.p1 {
            v.push(("p1", p1));
        }
        v
    }
}

/// Internal features captured during a forward pass, for composition checks.
pub struct ForwardTaps {
    /// Encoder pyramid features, stages 1..=5.
    pub encoder: Vec<Var>,
    /// RFE outputs for stages 5, 4, 3, 2 (deep to shallow).
    pub rfe: Vec<Var>,
    /// Stage-5 feature right after redistribution, before conditioning.
    pub stage5_redistributed: Var,
}

pub struct ForwardPass<E: Elem> {
    pub preds: PredictionSet<E>,
    pub logits: HeadLogits,
    pub taps: ForwardTaps,
}

#[allow(clippy::large_enum_variant)]
enum StageFusion {
    Cpfr(Cpfr),
    /// Ablation fallback: channel concat reduced by a 1x1 conv.
    ConcatConv(Conv2dLayer),
}

pub struct PolypSegNet<E: Elem> {
    pub cfg: ModelConfig,
    store: ParamStore<E>,
    encoder: ConvEncoder,
    /// RFEs for encoder stages 5, 4, 3, 2 (deep to shallow).
    rfe: Vec<Rfe>,
    pfr: Option<Pfr>,
    /// Fusions for stages 4, 3, 2 (deep to shallow).
    fusion: Vec<StageFusion>,
    /// Conditioning norms for stages 5, 4, 3, 2 (deep to shallow).
    cond: Vec<GroupNormLayer>,
    /// Prediction heads for stages 5, 4, 3, 2 (deep to shallow).
    heads: Vec<Conv2dLayer>,
    cfc: Option<Cfc>,
}

/// Deterministically build a model from its config and seed.
pub fn build_model<E: Elem>(cfg: ModelConfig, seed: u64) -> Result<PolypSegNet<E>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::seeded(seed);
    let encoder = ConvEncoder::init(&mut store, &mut rng, "encoder", cfg.encoder.clone())?;
    let c = cfg.decoder_width;

    let mut rfe = Vec::with_capacity(DECODER_STAGES.len());
    for &stage in &DECODER_STAGES {
        let in_ch = cfg.encoder.stage_channels[stage - 1];
        rfe.push(Rfe::init(
            &mut store,
            &mut rng,
            &format!("decoder.rfe{stage}"),
            RfeConfig::new(in_ch, c),
        )?);
    }
    let pfr = cfg
        .use_pfr
        .then(|| Pfr::init(&mut store, &mut rng, "decoder.pfr", c, cfg.pfr_scale_mode));
    let mut fusion = Vec::with_capacity(3);
    for &stage in &DECODER_STAGES[1..] {
        fusion.push(if cfg.use_cpfr {
            StageFusion::Cpfr(Cpfr::init(
                &mut store,
                &mut rng,
                &format!("decoder.cpfr{stage}"),
                c,
                cfg.cpfr_scale_mode,
            ))
        } else {
            StageFusion::ConcatConv(Conv2dLayer::init(
                &mut store,
                &mut rng,
                &format!("decoder.fuse{stage}"),
                2 * c,
                c,
                (1, 1),
                1,
            ))
        });
    }
    let cond = DECODER_STAGES
        .iter()
        .map(|stage| GroupNormLayer::init(&mut store, &format!("decoder.cond{stage}"), c))
        .collect();
    let heads = DECODER_STAGES
        .iter()
        .map(|stage| {
            Conv2dLayer::init(&mut store, &mut rng, &format!("head.p{stage}"), c, 1, (1, 1), 1)
        })
        .collect();
    let cfc = if cfg.use_cfc {
        Some(Cfc::init(
            &mut store,
            &mut rng,
            "cfc",
            cfg.cfc,
            cfg.pfr_scale_mode,
            cfg.cpfr_scale_mode,
        )?)
    } else {
        None
    };

    Ok(PolypSegNet {
        cfg,
        store,
        encoder,
        rfe,
        pfr,
        fusion,
        cond,
        heads,
        cfc,
    })
}

impl<E: Elem> PolypSegNet<E> {
    pub fn store(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.names().map(String::from).collect()
    }

    /// RFE of the i-th decoder stage (0 is the deepest, stage 5).
    pub fn decoder_rfe(&self, idx: usize) -> &Rfe {
        &self.rfe[idx]
    }

    pub fn decoder_pfr(&self) -> Option<&Pfr> {
        self.pfr.as_ref()
    }

    /// Cast parameters to another precision, preserving structure.
    pub fn cast<F: Elem>(&self) -> PolypSegNet<F> {
        let mut other = build_model::<F>(self.cfg.clone(), 0).expect("config already validated");
        for (name, value) in self.store.iter() {
            other
                .store
                .set(name, value.cast())
                .expect("identical structure");
        }
        other
    }

    /// Run the network on `(N, 3, S, S)` images in `[0, 1]`.
    ///
    /// `S` may be any square multiple of 32 (multi-scale training feeds
    /// rescaled batches); `cfg.input_size` is the default used by
    /// evaluation and the CLI.
    pub fn forward(&self, s: &mut Session<E>, images: &Tensor<E>) -> Result<ForwardPass<E>> {
        if images.shape().len() != 4 || images.shape()[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected (N, 3, S, S) images, got {:?}",
                images.shape()
            )));
        }
        let (_, _, h, w) = images.dims4();
        if h != w || h % 32 != 0 {
            return Err(Error::Contract(format!(
                "input must be square with side divisible by 32, got {h}x{w}"
            )));
        }
        if !images.all_finite() {
            return Err(Error::NonFinite {
                context: "input images".into(),
                batch: None,
            });
        }
        let full = h;
        let images = s.tape.leaf(images.clone(), false);

        let encoder_feats = self.encoder.forward(s, images);
        for (i, f) in encoder_feats.iter().enumerate() {
            check_stage(s, *f, &format!("encoder stage {}", i + 1))?;
        }

        // RFE on stages 5..2 (deep to shallow).
        let mut expanded = Vec::with_capacity(self.rfe.len());
        for (rfe, &stage) in self.rfe.iter().zip(&DECODER_STAGES) {
            let feat = encoder_feats[stage - 1];
            let e = rfe.forward(s, feat)?;
            check_stage(s, e, &format!("rfe stage {stage}"))?;
            expanded.push(e);
        }

        // Deepest stage: redistribute (or pass through when ablated).
        let stage5 = match &self.pfr {
            Some(pfr) => pfr.forward(s, expanded[0])?,
            None => expanded[0],
        };
        check_stage(s, stage5, "decoder stage 5")?;
        let mut stage_feats = vec![self.cond[0].forward(s, stage5)];

        // Walk up: upsample deeper output, fuse with same-stage RFE feature.
        for (i, fusion) in self.fusion.iter().enumerate() {
            let deeper = *stage_feats.last().unwrap();
            let (_, _, dh, dw) = s.value(deeper).dims4();
            let up = s.tape.upsample_bilinear(deeper, dh * 2, dw * 2);
            let fused = match fusion {
                StageFusion::Cpfr(cpfr) => cpfr.forward(s, expanded[i + 1], up)?,
                StageFusion::ConcatConv(conv) => {
                    let cat = s.tape.concat_channels(&[expanded[i + 1], up]);
                    conv.forward(s, cat)
                }
            };
            check_stage(s, fused, &format!("decoder stage {}", DECODER_STAGES[i + 1]))?;
            stage_feats.push(self.cond[i + 1].forward(s, fused));
        }

        // Heads: 1x1 conv to one channel, upsample logits to full size.
        let mut logits = Vec::with_capacity(4);
        for (head, feat) in self.heads.iter().zip(&stage_feats) {
            let z = head.forward(s, *feat);
            let z = s.tape.upsample_bilinear(z, full, full);
            check_stage(s, z, "prediction head")?;
            logits.push(z);
        }
        let (z5, z4, z3, z2) = (logits[0], logits[1], logits[2], logits[3]);

        let z1 = match &self.cfc {
            Some(cfc) => {
                let res = cfc.forward_residual(s, z2)?;
                check_stage(s, res, "cfc residual")?;
                Some(s.tape.add(z2, res))
            }
            None => None,
        };

        let p5 = s.tape.sigmoid(z5);
        let p4 = s.tape.sigmoid(z4);
        let p3 = s.tape.sigmoid(z3);
        let p2 = s.tape.sigmoid(z2);
        let p1 = z1.map(|z| s.tape.sigmoid(z));

        Ok(ForwardPass {
            preds: PredictionSet {
                p5: s.value(p5).clone(),
                p4: s.value(p4).clone(),
                p3: s.value(p3).clone(),
                p2: s.value(p2).clone(),
                p1: p1.map(|p| s.value(p).clone()),
            },
            logits: HeadLogits {
                p5: z5,
                p4: z4,
                p3: z3,
                p2: z2,
                p1: z1,
            },
            taps: ForwardTaps {
                encoder: encoder_feats,
                rfe: expanded,
                stage5_redistributed: stage5,
            },
        })
    }

    /// Inference convenience: no gradient recording.
    pub fn predict(&self, images: &Tensor<E>, threads: usize) -> Result<PredictionSet<E>> {
        let mut s = Session::eval(&self.store, threads);
        Ok(self.forward(&mut s, images)?.preds)
    }

    /// Analytic multiply-accumulate count for a square input of side `s`.
    /// Convolutions count `k_h*k_w*C_in*C_out*H_out*W_out`; each
    /// redistribution counts its flattened element count once for
    /// aggregation and once for allocation. Normalization, activations,
    /// pooling and interpolation are not counted.
    pub fn mac_count(&self, input_size: usize) -> u64 {
        let s = input_size;
        let mut total = self.encoder.macs(s);
        // stage sides: encoder stage i has side s / 2^i
        let side = |stage: usize| s >> stage;
        for (rfe, &stage) in self.rfe.iter().zip(&DECODER_STAGES) {
            total += rfe.macs(side(stage), side(stage));
        }
        if let Some(pfr) = &self.pfr {
            total += pfr.macs(side(5), side(5));
        }
        for (fusion, &stage) in self.fusion.iter().zip(&DECODER_STAGES[1..]) {
            total += match fusion {
                StageFusion::Cpfr(cpfr) => cpfr.macs(side(stage), side(stage)),
                StageFusion::ConcatConv(conv) => conv.macs(side(stage), side(stage)),
            };
        }
        for (head, &stage) in self.heads.iter().zip(&DECODER_STAGES) {
            total += head.macs(side(stage), side(stage));
        }
        if let Some(cfc) = &self.cfc {
            total += cfc.macs(s);
        }
        total
    }

    pub fn param_count(&self) -> u64 {
        self.store.param_count()
    }
}

fn check_stage<E: Elem>(s: &Session<E>, v: Var, name: &str) -> Result<()> {
    if s.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: name.into(),
            batch: None,
        })
    }
}
