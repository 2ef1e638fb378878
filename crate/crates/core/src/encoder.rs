//! Five-stage convolutional encoder.
//!
//! Each stage is two 3x3 conv + norm + rectify layers with a stride-2 first
//! conv, so cumulative strides are 2, 4, 8, 16, 32. This is the desk-scale
//! stand-in for the pluggable backbone family: anything that yields five
//! pyramid features with these strides can drop in through [`EncoderSpec`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ConvNormAct;
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Elem;

pub const ENCODER_STAGES: usize = 5;

/// Per-stage downsampling factors; cumulative strides 2, 4, 8, 16, 32.
pub const STAGE_STRIDES: [usize; ENCODER_STAGES] = [2, 2, 2, 2, 2];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct EncoderSpec {
    /// Backbone family name; only the built-in "conv" encoder ships.
    pub name: String,
    pub stage_channels: [usize; ENCODER_STAGES],
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            name: "conv".into(),
            stage_channels: [16, 24, 32, 64, 96],
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name != "conv" {
            return Err(Error::Config(format!(
                "unknown encoder '{}'; available: conv",
                self.name
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("encoder stage channels must be positive".into()));
        }
        Ok(())
    }
}

struct EncoderStage {
    down: ConvNormAct,
    refine: ConvNormAct,
}

pub struct ConvEncoder {
    pub spec: EncoderSpec,
    stages: Vec<EncoderStage>,
}

impl ConvEncoder {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        spec: EncoderSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(ENCODER_STAGES);
        let mut in_ch = 3;
        for (i, &c) in spec.stage_channels.iter().enumerate() {
            let sp = format!("{path}.stage{}", i + 1);
            stages.push(EncoderStage {
                down: ConvNormAct::init(store, rng, &format!("{sp}.down"), in_ch, c, (3, 3), 2, true),
                refine: ConvNormAct::init(store, rng, &format!("{sp}.refine"), c, c, (3, 3), 1, true),
            });
            in_ch = c;
        }
        Ok(ConvEncoder { spec, stages })
    }

    /// Produces the five pyramid features, shallow to deep.
    pub fn forward<E: Elem>(&self, s: &mut Session<E>, images: Var) -> Vec<Var> {
        let mut features = Vec::with_capacity(ENCODER_STAGES);
        let mut x = images;
        for stage in &self.stages {
            x = stage.down.forward(s, x);
            x = stage.refine.forward(s, x);
            features.push(x);
        }
        features
    }

    pub fn param_count(&self) -> u64 {
        self.stages
            .iter()
            .map(|st| st.down.param_count() + st.refine.param_count())
            .sum()
    }

    /// MACs for a square input of side `s`.
    pub fn macs(&self, s: usize) -> u64 {
        let mut total = 0;
        let mut side = s;
        for stage in &self.stages {
            total += stage.down.macs(side, side);
            side /= 2;
            total += stage.refine.macs(side, side);
        }
        total
    }
}
