//! Small layer bundles shared by the blocks, the encoder and the CFC module.

use crate::conv::ConvSpec;
use crate::params::{ParamStore, PId, Session};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Elem, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Draw a `(shape)` tensor uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn fan_in_uniform<E: Elem>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| E::from_f64(rng.uniform_in(-bound, bound)))
            .collect(),
    )
}

/// 2D convolution with bias.
#[derive(Clone)]
pub struct Conv2dLayer {
    pub weight: PId,
    pub bias: PId,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        (kh, kw): (usize, usize),
        stride: usize,
    ) -> Self {
        let spec = ConvSpec {
            in_ch,
            out_ch,
            kh,
            kw,
            stride,
            pad_h: (kh - 1) / 2,
            pad_w: (kw - 1) / 2,
        };
        let fan_in = in_ch * kh * kw;
        let weight = store.add(
            format!("{path}.weight"),
            fan_in_uniform(rng, &[out_ch, in_ch, kh, kw], fan_in),
        );
        let bias = store.add(format!("{path}.bias"), fan_in_uniform(rng, &[out_ch], fan_in));
        Conv2dLayer { weight, bias, spec }
    }

    /// All-zero weights and bias; used for the residual head so the refined
    /// map starts exactly equal to the coarse one.
    pub fn init_zero<E: Elem>(
        store: &mut ParamStore<E>,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        (kh, kw): (usize, usize),
    ) -> Self {
        let spec = ConvSpec {
            in_ch,
            out_ch,
            kh,
            kw,
            stride: 1,
            pad_h: (kh - 1) / 2,
            pad_w: (kw - 1) / 2,
        };
        let weight = store.add(
            format!("{path}.weight"),
            Tensor::zeros(&[out_ch, in_ch, kh, kw]),
        );
        let bias = store.add(format!("{path}.bias"), Tensor::zeros(&[out_ch]));
        Conv2dLayer { weight, bias, spec }
    }

    pub fn forward<E: Elem>(&self, s: &mut Session<E>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.conv2d(x, w, Some(b), self.spec)
    }

    pub fn param_count(&self) -> u64 {
        let s = &self.spec;
        (s.out_ch * (s.in_ch * s.kh * s.kw + 1)) as u64
    }

    /// Multiply-accumulates for an input of `h x w` (bias excluded).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let s = &self.spec;
        let (oh, ow) = s.out_hw(h, w);
        (s.kh * s.kw * s.in_ch * s.out_ch * oh * ow) as u64
    }
}

/// Group normalization with affine scale/shift. Group count is the largest
/// power-of-two divisor of the channel count capped at 8, so channel widths
/// that are multiples of 8 get 8 groups while odd widths degrade gracefully.
#[derive(Clone)]
pub struct GroupNormLayer {
    pub gamma: PId,
    pub beta: PId,
    pub groups: usize,
}

pub fn group_count(channels: usize) -> usize {
    let mut g = 8;
    while g > 1 && !channels.is_multiple_of(g) {
        g /= 2;
    }
    g
}

impl GroupNormLayer {
    pub fn init<E: Elem>(store: &mut ParamStore<E>, path: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{path}.gamma"), Tensor::full(&[channels], E::ONE));
        let beta = store.add(format!("{path}.beta"), Tensor::zeros(&[channels]));
        GroupNormLayer {
            gamma,
            beta,
            groups: group_count(channels),
        }
    }

    pub fn forward<E: Elem>(&self, s: &mut Session<E>, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.tape.group_norm(x, gamma, beta, self.groups, GROUP_NORM_EPS)
    }

    pub fn param_count<E: Elem>(&self, store: &ParamStore<E>) -> u64 {
        (store.value(self.gamma).numel() + store.value(self.beta).numel()) as u64
    }
}

/// Convolution optionally followed by normalization + rectification.
#[derive(Clone)]
pub struct ConvNormAct {
    pub conv: Conv2dLayer,
    pub norm: Option<GroupNormLayer>,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        norm_act: bool,
    ) -> Self {
        let conv = Conv2dLayer::init(store, rng, &format!("{path}.conv"), in_ch, out_ch, kernel, stride);
        let norm = norm_act.then(|| GroupNormLayer::init(store, &format!("{path}.norm"), out_ch));
        ConvNormAct { conv, norm }
    }

    pub fn forward<E: Elem>(&self, s: &mut Session<E>, x: Var) -> Var {
        let y = self.conv.forward(s, x);
        match &self.norm {
            Some(norm) => {
                let gamma = s.param(norm.gamma);
                let beta = s.param(norm.beta);
                s.tape
                    .group_norm_relu(y, gamma, beta, norm.groups, GROUP_NORM_EPS)
            }
            None => y,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.conv.param_count() + self.norm.as_ref().map_or(0, |_| 2 * self.conv.spec.out_ch as u64)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}
