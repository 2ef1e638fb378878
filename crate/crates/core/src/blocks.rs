//! The three reusable computational blocks: receptive-field expansion (RFE),
//! pixel-wise feature redistribution (PFR) and its cross-stage variant
//! (CPFR).
//!
//! All three are pure functions of (parameters, input). PFR compresses a
//! feature map into a single per-batch scalar — the inner product of the
//! flattened Q and K projections — and redistributes V globally by that
//! scalar. CPFR does the same over the channel-concatenation of two stages
//! (2C channels) and reduces back to C with a trailing 1x1 convolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, ConvNormAct};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Elem, Tensor};

/// How the holistic correlation scalar is scaled before redistribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Raw batch matrix product; the default.
    #[default]
    Raw,
    /// Divide by the number of flattened elements for magnitude control.
    InvChw,
}

// ---------------------------------------------------------------------------
// RFE
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RfeConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Ordered branch kernel sizes; entry 1 is a plain 1x1 branch, entry j>1
    /// is the separable 1x1 -> 1xj -> jx1 stack.
    pub branch_kernels: Vec<usize>,
    /// Normalization + rectification after each convolution.
    pub use_norm_act: bool,
}

impl RfeConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        RfeConfig {
            in_channels,
            out_channels,
            branch_kernels: vec![1, 3, 5, 7],
            use_norm_act: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("rfe channels must be positive".into()));
        }
        if self.branch_kernels.is_empty() {
            return Err(Error::Config("rfe needs at least one branch".into()));
        }
        if self.branch_kernels[0] != 1 {
            return Err(Error::Config(format!(
                "first rfe branch kernel must be 1, got {}",
                self.branch_kernels[0]
            )));
        }
        for &k in &self.branch_kernels {
            if k % 2 == 0 || k == 0 {
                return Err(Error::Config(format!("rfe branch kernels must be odd, got {k}")));
            }
        }
        Ok(())
    }
}

#[allow(clippy::large_enum_variant)]
enum RfeBranch {
    Pointwise(ConvNormAct),
    Separable {
        pre: ConvNormAct,
        horiz: ConvNormAct,
        vert: ConvNormAct,
    },
}

/// Receptive field expanding block: parallel separable-kernel branches,
/// channel concat, 1x1 reduction to `out_channels`.
pub struct Rfe {
    pub cfg: RfeConfig,
    branches: Vec<RfeBranch>,
    reduce: ConvNormAct,
}

impl Rfe {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        cfg: RfeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.out_channels;
        let na = cfg.use_norm_act;
        let mut branches = Vec::with_capacity(cfg.branch_kernels.len());
        for &k in &cfg.branch_kernels {
            let bp = format!("{path}.branch{k}");
            if k == 1 {
                branches.push(RfeBranch::Pointwise(ConvNormAct::init(
                    store, rng, &bp, cfg.in_channels, c, (1, 1), 1, na,
                )));
            } else {
                branches.push(RfeBranch::Separable {
                    pre: ConvNormAct::init(
                        store,
                        rng,
                        &format!("{bp}.pre"),
                        cfg.in_channels,
                        c,
                        (1, 1),
                        1,
                        na,
                    ),
                    horiz: ConvNormAct::init(store, rng, &format!("{bp}.horiz"), c, c, (1, k), 1, na),
                    vert: ConvNormAct::init(store, rng, &format!("{bp}.vert"), c, c, (k, 1), 1, na),
                });
            }
        }
        let reduce = ConvNormAct::init(
            store,
            rng,
            &format!("{path}.reduce"),
            cfg.branch_kernels.len() * c,
            c,
            (1, 1),
            1,
            na,
        );
        Ok(Rfe { cfg, branches, reduce })
    }

    pub fn forward<E: Elem>(&self, s: &mut Session<E>, x: Var) -> Result<Var> {
        let (_, c, _, _) = s.value(x).dims4();
        if c != self.cfg.in_channels {
            return Err(Error::Contract(format!(
                "rfe expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            outs.push(match branch {
                RfeBranch::Pointwise(conv) => conv.forward(s, x),
                RfeBranch::Separable { pre, horiz, vert } => {
                    let y = pre.forward(s, x);
                    let y = horiz.forward(s, y);
                    vert.forward(s, y)
                }
            });
        }
        let cat = s.tape.concat_channels(&outs);
        Ok(self.reduce.forward(s, cat))
    }

    /// Standalone evaluation with the usual feature-map checks.
    pub fn apply<E: Elem>(&self, store: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        reject_non_finite(x, "rfe input")?;
        let mut s = Session::eval(store, 1);
        let xv = s.tape.leaf(x.clone(), false);
        let out = self.forward(&mut s, xv)?;
        let out = s.value(out).clone();
        reject_non_finite(&out, "rfe output")?;
        Ok(out)
    }

    pub fn param_count(&self) -> u64 {
        let mut n = self.reduce.param_count();
        for b in &self.branches {
            n += match b {
                RfeBranch::Pointwise(conv) => conv.param_count(),
                RfeBranch::Separable { pre, horiz, vert } => {
                    pre.param_count() + horiz.param_count() + vert.param_count()
                }
            };
        }
        n
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut n = self.reduce.macs(h, w);
        for b in &self.branches {
            n += match b {
                RfeBranch::Pointwise(conv) => conv.macs(h, w),
                RfeBranch::Separable { pre, horiz, vert } => {
                    pre.macs(h, w) + horiz.macs(h, w) + vert.macs(h, w)
                }
            };
        }
        n
    }
}

// ---------------------------------------------------------------------------
// PFR
// ---------------------------------------------------------------------------

/// Pixel-wise feature redistribution over a single stage.
pub struct Pfr {
    pub channels: usize,
    pub scale_mode: ScaleMode,
    q: Conv2dLayer,
    k: Conv2dLayer,
    v: Conv2dLayer,
}

impl Pfr {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        channels: usize,
        scale_mode: ScaleMode,
    ) -> Self {
        Pfr {
            channels,
            scale_mode,
            q: Conv2dLayer::init(store, rng, &format!("{path}.q"), channels, channels, (1, 1), 1),
            k: Conv2dLayer::init(store, rng, &format!("{path}.k"), channels, channels, (1, 1), 1),
            v: Conv2dLayer::init(store, rng, &format!("{path}.v"), channels, channels, (1, 1), 1),
        }
    }

    pub fn forward<E: Elem>(&self, s: &mut Session<E>, x: Var) -> Result<Var> {
        let (_, c, h, w) = s.value(x).dims4();
        if c != self.channels {
            return Err(Error::Contract(format!(
                "pfr expects {} channels, got {c}",
                self.channels
            )));
        }
        let q = self.q.forward(s, x);
        let k = self.k.forward(s, x);
        let v = self.v.forward(s, x);
        // Holistic correlation: dot of flattened Q and K, one scalar per
        // batch element (the (N,1,1) batch matmul collapsed).
        let mut f_h = s.tape.batch_dot(q, k);
        if self.scale_mode == ScaleMode::InvChw {
            f_h = s.tape.scale(f_h, E::ONE / E::from_f64((c * h * w) as f64));
        }
        check_correlation_finite(s.value(f_h), "pfr")?;
        Ok(s.tape.batch_scale(v, f_h))
    }

    pub fn apply<E: Elem>(&self, store: &ParamStore<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        reject_non_finite(x, "pfr input")?;
        let mut s = Session::eval(store, 1);
        let xv = s.tape.leaf(x.clone(), false);
        let out = self.forward(&mut s, xv)?;
        let out = s.value(out).clone();
        reject_non_finite(&out, "pfr output")?;
        Ok(out)
    }

    pub fn param_count(&self) -> u64 {
        self.q.param_count() + self.k.param_count() + self.v.param_count()
    }

    /// Three pointwise convs plus one `C*H*W` term each for aggregation and
    /// allocation.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let convs = self.q.macs(h, w) + self.k.macs(h, w) + self.v.macs(h, w);
        convs + 2 * (self.channels * h * w) as u64
    }
}

// ---------------------------------------------------------------------------
// CPFR
// ---------------------------------------------------------------------------

/// Cross-stage pixel-wise feature redistribution: concatenates a same-stage
/// feature with the upsampled deeper one (2C channels), redistributes, and
/// reduces back to C.
pub struct Cpfr {
    pub channels: usize,
    pub scale_mode: ScaleMode,
    q: Conv2dLayer,
    k: Conv2dLayer,
    v: Conv2dLayer,
    out: Conv2dLayer,
}

impl Cpfr {
    pub fn init<E: Elem>(
        store: &mut ParamStore<E>,
        rng: &mut Rng,
        path: &str,
        channels: usize,
        scale_mode: ScaleMode,
    ) -> Self {
        let c2 = 2 * channels;
        Cpfr {
            channels,
            scale_mode,
            q: Conv2dLayer::init(store, rng, &format!("{path}.q"), c2, c2, (1, 1), 1),
            k: Conv2dLayer::init(store, rng, &format!("{path}.k"), c2, c2, (1, 1), 1),
            v: Conv2dLayer::init(store, rng, &format!("{path}.v"), c2, c2, (1, 1), 1),
            out: Conv2dLayer::init(store, rng, &format!("{path}.out"), c2, channels, (1, 1), 1),
        }
    }

    pub fn forward<E: Elem>(&self, s: &mut Session<E>, low: Var, high: Var) -> Result<Var> {
        let lshape = s.value(low).shape().to_vec();
        let hshape = s.value(high).shape().to_vec();
        if lshape != hshape {
            return Err(Error::Contract(format!(
                "cpfr inputs must share a shape: low {lshape:?} vs high {hshape:?}"
            )));
        }
        let (_, c, h, w) = s.value(low).dims4();
        if c != self.channels {
            return Err(Error::Contract(format!(
                "cpfr expects {} channels per input, got {c}",
                self.channels
            )));
        }
        let cat = s.tape.concat_channels(&[low, high]);
        let q = self.q.forward(s, cat);
        let k = self.k.forward(s, cat);
        let v = self.v.forward(s, cat);
        let mut f_hol = s.tape.batch_dot(q, k);
        if self.scale_mode == ScaleMode::InvChw {
            f_hol = s.tape.scale(f_hol, E::ONE / E::from_f64((2 * c * h * w) as f64));
        }
        check_correlation_finite(s.value(f_hol), "cpfr")?;
        let allocated = s.tape.batch_scale(v, f_hol);
        Ok(self.out.forward(s, allocated))
    }

    pub fn apply<E: Elem>(
        &self,
        store: &ParamStore<E>,
        low: &Tensor<E>,
        high: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        reject_non_finite(low, "cpfr low input")?;
        reject_non_finite(high, "cpfr high input")?;
        let mut s = Session::eval(store, 1);
        let lv = s.tape.leaf(low.clone(), false);
        let hv = s.tape.leaf(high.clone(), false);
        let out = self.forward(&mut s, lv, hv)?;
        let out = s.value(out).clone();
        reject_non_finite(&out, "cpfr output")?;
        Ok(out)
    }

    pub fn param_count(&self) -> u64 {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.out.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let convs =
            self.q.macs(h, w) + self.k.macs(h, w) + self.v.macs(h, w) + self.out.macs(h, w);
        convs + 2 * (2 * self.channels * h * w) as u64
    }
}

fn reject_non_finite<E: Elem>(t: &Tensor<E>, context: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            batch: None,
        })
    }
}

/// The correlation scalar must be finite for every batch element; a blow-up
/// here is the canonical magnitude failure, so name the offender.
fn check_correlation_finite<E: Elem>(f_h: &Tensor<E>, block: &str) -> Result<()> {
    for (i, v) in f_h.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{block} holistic correlation scalar"),
                batch: Some(i),
            });
        }
    }
    Ok(())
}
