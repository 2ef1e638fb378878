//! Shared oracle helpers for the integration suites. Everything here is
//! deliberately naive and independent of the library's compute paths.

#![allow(dead_code)]

use polypseg_core::rng::Rng;
use polypseg_core::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(lo, hi)).collect())
}

pub fn random_binary_mask(shape: &[usize], seed: u64, p_one: f64) -> Tensor<f64> {
    let mut rng = Rng::seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| if rng.uniform() < p_one { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// A dense matrix representing one zero-padded stride-1 convolution as a
/// linear map from the flattened `(C_in, H, W)` input to the flattened
/// `(C_out, H, W)` output. Bias handled separately.
pub struct ConvMatrix {
    pub rows: usize,
    pub cols: usize,
    pub m: Vec<f64>,
    pub bias: Vec<f64>,
    pub out_ch: usize,
    pub hw: usize,
}

impl ConvMatrix {
    pub fn from_weights(
        w: &Tensor<f64>,
        bias: &Tensor<f64>,
        h: usize,
        wd: usize,
    ) -> ConvMatrix {
        let (out_ch, in_ch, kh, kw) = w.dims4();
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let rows = out_ch * h * wd;
        let cols = in_ch * h * wd;
        let mut m = vec![0.0; rows * cols];
        for co in 0..out_ch {
            for oy in 0..h {
                for ox in 0..wd {
                    let row = (co * h + oy) * wd + ox;
                    for ci in 0..in_ch {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = oy as i64 + ki as i64 - ph as i64;
                                let ix = ox as i64 + kj as i64 - pw as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let col = (ci * h + iy as usize) * wd + ix as usize;
                                m[row * cols + col] += w.at4(co, ci, ki, kj);
                            }
                        }
                    }
                }
            }
        }
        ConvMatrix {
            rows,
            cols,
            m,
            bias: bias.data().to_vec(),
            out_ch,
            hw: h * wd,
        }
    }

    /// Apply to one flattened sample.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (row, out) in y.iter_mut().enumerate() {
            let mut acc = self.bias[row / self.hw];
            for (col, &xv) in x.iter().enumerate() {
                acc += self.m[row * self.cols + col] * xv;
            }
            *out = acc;
        }
        y
    }
}

/// Scalar-loop redistribution oracle: project with explicit 1x1 convolutions,
/// flatten, dot, broadcast. Mirrors the PFR contract with none of the
/// library machinery.
pub struct ProjOracle {
    /// (out_ch, in_ch) weights of a 1x1 convolution.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl ProjOracle {
    pub fn from_params(w: &Tensor<f64>, b: &Tensor<f64>) -> ProjOracle {
        let (out_ch, in_ch, kh, kw) = w.dims4();
        assert_eq!((kh, kw), (1, 1));
        let mut weights = vec![vec![0.0; in_ch]; out_ch];
        for (co, row) in weights.iter_mut().enumerate() {
            for (ci, v) in row.iter_mut().enumerate() {
                *v = w.at4(co, ci, 0, 0);
            }
        }
        ProjOracle {
            w: weights,
            b: b.data().to_vec(),
        }
    }

    /// Apply to one sample `(C, H, W)` flattened channel-major.
    pub fn apply(&self, x: &[f64], hw: usize) -> Vec<f64> {
        let in_ch = self.w[0].len();
        assert_eq!(x.len(), in_ch * hw);
        let mut y = vec![0.0; self.w.len() * hw];
        for (co, row) in self.w.iter().enumerate() {
            for p in 0..hw {
                let mut acc = self.b[co];
                for (ci, &wv) in row.iter().enumerate() {
                    acc += wv * x[ci * hw + p];
                }
                y[co * hw + p] = acc;
            }
        }
        y
    }
}

/// The dot-scalar redistribution path: `out = (flat(Q) . flat(K)) * V`,
/// computed per batch element with plain loops.
pub fn redistribution_oracle(
    x: &Tensor<f64>,
    q: &ProjOracle,
    k: &ProjOracle,
    v: &ProjOracle,
    divide_by_elems: bool,
) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let per = c * hw;
    let mut out = Tensor::zeros_like(x);
    for i in 0..n {
        let xi = &x.data()[i * per..(i + 1) * per];
        let qv = q.apply(xi, hw);
        let kv = k.apply(xi, hw);
        let vv = v.apply(xi, hw);
        let mut scalar: f64 = qv.iter().zip(&kv).map(|(a, b)| a * b).sum();
        if divide_by_elems {
            scalar /= per as f64;
        }
        for (o, val) in out.data_mut()[i * per..(i + 1) * per].iter_mut().zip(&vv) {
            *o = scalar * val;
        }
    }
    out
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Closed-form parameter and MAC counts, written as plain arithmetic over the
// declared layer list (independent of the library's own counters).
// ---------------------------------------------------------------------------

pub struct ClosedForm {
    pub encoder_channels: [usize; 5],
    pub decoder_width: usize,
    pub use_pfr: bool,
    pub use_cpfr: bool,
    pub use_cfc: bool,
}

impl ClosedForm {
    fn conv_params(cin: usize, cout: usize, kh: usize, kw: usize) -> u64 {
        (cout * (cin * kh * kw + 1)) as u64
    }

    fn gn_params(c: usize) -> u64 {
        2 * c as u64
    }

    fn conv_gn_params(cin: usize, cout: usize, kh: usize, kw: usize) -> u64 {
        Self::conv_params(cin, cout, kh, kw) + Self::gn_params(cout)
    }

    fn rfe_params(cin: usize, c: usize) -> u64 {
        let mut n = Self::conv_gn_params(cin, c, 1, 1);
        for j in [3, 5, 7] {
            n += Self::conv_gn_params(cin, c, 1, 1)
                + Self::conv_gn_params(c, c, 1, j)
                + Self::conv_gn_params(c, c, j, 1);
        }
        n + Self::conv_gn_params(4 * c, c, 1, 1)
    }

    fn pfr_params(c: usize) -> u64 {
        3 * Self::conv_params(c, c, 1, 1)
    }

    fn cpfr_params(c: usize) -> u64 {
        3 * Self::conv_params(2 * c, 2 * c, 1, 1) + Self::conv_params(2 * c, c, 1, 1)
    }

    pub fn param_count(&self) -> u64 {
        let c = self.decoder_width;
        let mut total = 0;
        let mut prev = 3;
        for ch in self.encoder_channels {
            total += Self::conv_gn_params(prev, ch, 3, 3) + Self::conv_gn_params(ch, ch, 3, 3);
            prev = ch;
        }
        for stage in [4usize, 3, 2, 1] {
            total += Self::rfe_params(self.encoder_channels[stage], c);
        }
        if self.use_pfr {
            total += Self::pfr_params(c);
        }
        if self.use_cpfr {
            total += 3 * Self::cpfr_params(c);
        } else {
            total += 3 * Self::conv_params(2 * c, c, 1, 1); // concat-conv fusion
        }
        total += 4 * Self::gn_params(c); // conditioning
        total += 4 * Self::conv_params(c, 1, 1, 1); // heads
        if self.use_cfc {
            total += Self::conv_gn_params(1, 32, 3, 3) + 3 * Self::conv_gn_params(32, 32, 3, 3);
            total += 4 * Self::rfe_params(32, 32);
            total += Self::pfr_params(32) + 3 * Self::cpfr_params(32);
            total += 4 * Self::gn_params(32);
            total += Self::conv_params(32, 1, 1, 1);
        }
        total
    }

    fn conv_macs(cin: usize, cout: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> u64 {
        (kh * kw * cin * cout * oh * ow) as u64
    }

    fn rfe_macs(cin: usize, c: usize, s: usize) -> u64 {
        let mut n = Self::conv_macs(cin, c, 1, 1, s, s);
        for j in [3, 5, 7] {
            n += Self::conv_macs(cin, c, 1, 1, s, s)
                + Self::conv_macs(c, c, 1, j, s, s)
                + Self::conv_macs(c, c, j, 1, s, s);
        }
        n + Self::conv_macs(4 * c, c, 1, 1, s, s)
    }

    fn pfr_macs(c: usize, s: usize) -> u64 {
        3 * Self::conv_macs(c, c, 1, 1, s, s) + 2 * (c * s * s) as u64
    }

    fn cpfr_macs(c: usize, s: usize) -> u64 {
        3 * Self::conv_macs(2 * c, 2 * c, 1, 1, s, s)
            + Self::conv_macs(2 * c, c, 1, 1, s, s)
            + 2 * (2 * c * s * s) as u64
    }

    pub fn mac_count(&self, input: usize) -> u64 {
        let c = self.decoder_width;
        let mut total = 0;
        let mut prev = 3;
        let mut side = input;
        for ch in self.encoder_channels {
            total += Self::conv_macs(prev, ch, 3, 3, side / 2, side / 2);
            side /= 2;
            total += Self::conv_macs(ch, ch, 3, 3, side, side);
            prev = ch;
        }
        // decoder stages 5..2 at input / 2^stage
        let sides = [input / 32, input / 16, input / 8, input / 4];
        for (i, stage) in [4usize, 3, 2, 1].iter().enumerate() {
            total += Self::rfe_macs(self.encoder_channels[*stage], c, sides[i]);
        }
        if self.use_pfr {
            total += Self::pfr_macs(c, sides[0]);
        }
        for s in &sides[1..] {
            total += if self.use_cpfr {
                Self::cpfr_macs(c, *s)
            } else {
                Self::conv_macs(2 * c, c, 1, 1, *s, *s)
            };
        }
        for s in &sides {
            total += Self::conv_macs(c, 1, 1, 1, *s, *s); // heads
        }
        if self.use_cfc {
            let mut s = input;
            total += Self::conv_macs(1, 32, 3, 3, s, s);
            for _ in 0..3 {
                s /= 2;
                total += Self::conv_macs(32, 32, 3, 3, s, s);
            }
            let pooled = [input / 2, input / 4, input / 8, input / 16];
            for p in pooled {
                total += Self::rfe_macs(32, 32, p);
            }
            total += Self::pfr_macs(32, pooled[3]);
            for p in &pooled[..3] {
                total += Self::cpfr_macs(32, *p);
            }
            total += Self::conv_macs(32, 1, 1, 1, input, input); // residual head
        }
        total
    }
}

// ---------------------------------------------------------------------------
// Scalar single-sample reimplementations of the network's building blocks,
// operating on flat `(C, H, W)` buffers. Used to unroll whole pipelines.
// ---------------------------------------------------------------------------

pub fn scalar_group_norm(
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
    eps: f64,
) -> Vec<f64> {
    let cg = c / groups;
    let m = cg * hw;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let span = g * m..(g + 1) * m;
        let mean: f64 = x[span.clone()].iter().sum::<f64>() / m as f64;
        let var: f64 = x[span.clone()].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for k in 0..m {
            let idx = g * m + k;
            let ch = g * cg + k / hw;
            out[idx] = gamma[ch] * (x[idx] - mean) * inv_std + beta[ch];
        }
    }
    out
}

pub fn scalar_relu(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn scalar_maxpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

/// Bilinear x2 upsampling with half-pixel centers and edge clamping,
/// written from the documented semantics.
pub fn scalar_upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let tap = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let center = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        let clamped = center.max(0.0);
        let i0 = (clamped.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, (clamped - i0 as f64).clamp(0.0, 1.0))
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = tap(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = tap(ox, w, ow);
                out[(ch * oh + oy) * ow + ox] = x[(ch * h + y0) * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + x[(ch * h + y0) * w + x1] * (1.0 - fy) * fx
                    + x[(ch * h + y1) * w + x0] * fy * (1.0 - fx)
                    + x[(ch * h + y1) * w + x1] * fy * fx;
            }
        }
    }
    out
}

/// Look up a named parameter pair and apply the convolution as a dense
/// matrix, then group norm + rectification, matching `ConvNormAct`.
pub struct NamedOracle<'a> {
    pub store: &'a polypseg_core::params::ParamStore<f64>,
}

impl<'a> NamedOracle<'a> {
    pub fn tensor(&self, name: &str) -> &Tensor<f64> {
        self.store
            .value(self.store.id_of(name).unwrap_or_else(|| panic!("missing param {name}")))
    }

    pub fn conv(&self, path: &str, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let weight = self.tensor(&format!("{path}.weight"));
        let bias = self.tensor(&format!("{path}.bias"));
        ConvMatrix::from_weights(weight, bias, h, w).apply(x)
    }

    pub fn conv_gn_relu(&self, path: &str, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let y = self.conv(&format!("{path}.conv"), x, h, w);
        let gamma = self.tensor(&format!("{path}.norm.gamma")).data();
        let beta = self.tensor(&format!("{path}.norm.beta")).data();
        let c = gamma.len();
        let groups = polypseg_core::nn::group_count(c);
        let mut out = scalar_group_norm(&y, c, h * w, gamma, beta, groups, 1e-5);
        scalar_relu(&mut out);
        out
    }

    /// Full RFE block (norm + act on) at one spatial size.
    pub fn rfe(&self, path: &str, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut branches = Vec::new();
        branches.push(self.conv_gn_relu(&format!("{path}.branch1"), x, h, w));
        for j in [3, 5, 7] {
            let pre = self.conv_gn_relu(&format!("{path}.branch{j}.pre"), x, h, w);
            let horiz = self.conv_gn_relu(&format!("{path}.branch{j}.horiz"), &pre, h, w);
            branches.push(self.conv_gn_relu(&format!("{path}.branch{j}.vert"), &horiz, h, w));
        }
        let concat: Vec<f64> = branches.concat();
        self.conv_gn_relu(&format!("{path}.reduce"), &concat, h, w)
    }

    /// Single-stage redistribution (the dot-scalar form).
    pub fn pfr(&self, path: &str, x: &[f64], hw: usize) -> Vec<f64> {
        let q = ProjOracle::from_params(
            self.tensor(&format!("{path}.q.weight")),
            self.tensor(&format!("{path}.q.bias")),
        );
        let k = ProjOracle::from_params(
            self.tensor(&format!("{path}.k.weight")),
            self.tensor(&format!("{path}.k.bias")),
        );
        let v = ProjOracle::from_params(
            self.tensor(&format!("{path}.v.weight")),
            self.tensor(&format!("{path}.v.bias")),
        );
        let qv = q.apply(x, hw);
        let kv = k.apply(x, hw);
        let vv = v.apply(x, hw);
        let scalar: f64 = qv.iter().zip(&kv).map(|(a, b)| a * b).sum();
        vv.into_iter().map(|v| v * scalar).collect()
    }

    /// Cross-stage redistribution over a channel concat, reduced back to C.
    pub fn cpfr(&self, path: &str, low: &[f64], high: &[f64], hw: usize) -> Vec<f64> {
        let mut cat = Vec::with_capacity(low.len() + high.len());
        cat.extend_from_slice(low);
        cat.extend_from_slice(high);
        let allocated = self.pfr(path, &cat, hw);
        let out = ProjOracle::from_params(
            self.tensor(&format!("{path}.out.weight")),
            self.tensor(&format!("{path}.out.bias")),
        );
        out.apply(&allocated, hw)
    }

    pub fn group_norm(&self, path: &str, x: &[f64], hw: usize) -> Vec<f64> {
        let gamma = self.tensor(&format!("{path}.gamma")).data();
        let beta = self.tensor(&format!("{path}.beta")).data();
        let c = gamma.len();
        let groups = polypseg_core::nn::group_count(c);
        scalar_group_norm(x, c, hw, gamma, beta, groups, 1e-5)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking shared by the gradient and acceptance
// suites.
// ---------------------------------------------------------------------------

use polypseg_core::params::{ParamStore, PId, Session};

pub const FD_STEP: f64 = 1e-5;
pub const BLOCK_TOL: f64 = 1e-4;
/// Central differences carry rounding noise around 1e-10 at these scales;
/// identically-zero gradients (a conv bias under a mean-subtracting norm)
/// must not fail on that noise.
pub const FD_NOISE_FLOOR: f64 = 1e-5;

/// Check d(sum of outputs)/d(input and every parameter) for a block whose
/// forward is `f(store, session, x_var)`.
pub fn check_block<F>(store: &ParamStore<f64>, x0: &Tensor<f64>, forward: F, tol: f64, label: &str)
where
    F: Fn(&ParamStore<f64>, &mut Session<f64>, polypseg_core::tape::Var) -> polypseg_core::tape::Var,
{
    // Analytic gradients.
    let mut sess = Session::new(store, 1);
    let x = sess.tape.leaf(x0.clone(), true);
    let y = forward(store, &mut sess, x);
    let loss_var = sess.tape.sum_all(y);
    let mut grads = sess.tape.backward(loss_var);
    let dx = grads.get(x).expect("input gradient").clone();
    let param_grads = sess.parameter_gradients(&mut grads);

    // Scalar loss through a fresh session, for finite differences.
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut sess = Session::eval(store, 1);
        let xv = sess.tape.leaf(x.clone(), false);
        let y = forward(store, &mut sess, xv);
        sess.value(y).data().iter().sum()
    };

    // Input gradient, on a spread of elements.
    let stride = 1 + x0.numel() / 23;
    for idx in (0..x0.numel()).step_by(stride) {
        let mut xp = x0.clone();
        xp.data_mut()[idx] += FD_STEP;
        let mut xm = x0.clone();
        xm.data_mut()[idx] -= FD_STEP;
        let numeric = (eval(store, &xp) - eval(store, &xm)) / (2.0 * FD_STEP);
        let analytic = dx.data()[idx];
        assert!(
            rel_err(numeric, analytic, FD_NOISE_FLOOR) < tol,
            "{label}: d/dx[{idx}] numeric {numeric} vs analytic {analytic}"
        );
    }

    // Every parameter, on a spread of elements.
    for pid in 0..store.len() {
        let id = PId::from_index(pid);
        let name = store.name(id).to_string();
        let base = store.value(id).clone();
        let Some(pg) = param_grads[pid].as_ref() else {
            continue;
        };
        let stride = 1 + base.numel() / 7;
        for idx in (0..base.numel()).step_by(stride) {
            let mut plus = store.cast::<f64>();
            plus.value_mut(id).data_mut()[idx] += FD_STEP;
            let mut minus = store.cast::<f64>();
            minus.value_mut(id).data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus, x0) - eval(&minus, x0)) / (2.0 * FD_STEP);
            let analytic = pg.data()[idx];
            assert!(
                rel_err(numeric, analytic, FD_NOISE_FLOOR) < tol,
                "{label}: d/d{name}[{idx}] numeric {numeric} vs analytic {analytic}"
            );
        }
    }
}

