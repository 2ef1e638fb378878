//! Reverse-mode autodiff over a flat tape.
//!
//! Nodes are appended in execution order, so walking the tape backwards is a
//! reverse topological order and every gradient contribution reaches a node
//! before the node itself is processed. Backward closures read parent values
//! through the tape and push per-parent gradients into a sink; gradient
//! accumulation order is fixed, which keeps the whole engine bit-exact
//! regardless of thread count (threading only ever shards the batch axis).

use rayon::prelude::*;

use crate::conv::{conv2d_backward_cached, conv2d_forward_cached, ConvSpec};
use crate::parallel;
use crate::tensor::{Elem, Tensor};

/// Below this element count the parallel elementwise paths are not worth
/// the dispatch overhead.
const PAR_ELEMWISE_MIN: usize = 1 << 16;

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&Tape<E>, &Tensor<E>, &mut dyn FnMut(usize, Tensor<E>)) + Send + Sync>;

struct Node<E: Elem> {
    value: Tensor<E>,
    needs_grad: bool,
    backward: Option<BackFn<E>>,
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    /// Worker threads for batch-sharded kernels. Results are independent of
    /// this value by construction.
    pub threads: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<E: Elem> Tape<E> {
    pub fn new(threads: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            threads: threads.max(1),
        }
    }

    /// A tape that records values but no backward closures; for inference.
    pub fn eval(threads: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            threads: threads.max(1),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<E>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad: needs_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        value: Tensor<E>,
        parents: &[Var],
        backward: impl Fn(&Tape<E>, &Tensor<E>, &mut dyn FnMut(usize, Tensor<E>)) + Send + Sync + 'static,
    ) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            backward: if needs_grad { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// that needed them; leaves keep theirs for extraction.
    pub fn backward(&self, root: Var) -> Gradients<E> {
        assert!(self.grad_enabled, "backward on an eval tape");
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(&[1], vec![E::ONE]));
        for i in (0..=root.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue; // leaf: keep any accumulated gradient
            }
            let Some(g) = grads[i].take() else { continue };
            let back = self.nodes[i].backward.as_ref().unwrap();
            back(self, &g, &mut |parent, contribution| {
                if !self.nodes[parent].needs_grad {
                    return;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), contribution.shape());
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            });
        }
        Gradients { grads }
    }
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

impl<E: Elem> Tape<E> {
    fn binary_same_shape(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{name}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value = zip_t(self.threads, self.value(a), self.value(b), |x, y| x + y);
        self.push(value, &[a, b], move |_, g, sink| {
            sink(a.0, g.clone());
            sink(b.0, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, &[a, b], move |_, g, sink| {
            sink(a.0, g.clone());
            sink(b.0, g.map(|v| -v));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value = zip_t(self.threads, self.value(a), self.value(b), |x, y| x * y);
        self.push(value, &[a, b], move |t, g, sink| {
            sink(a.0, zip_t(t.threads, g, t.value(b), |gv, bv| gv * bv));
            sink(b.0, zip_t(t.threads, g, t.value(a), |gv, av| gv * av));
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let value = zip(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, &[a, b], move |t, g, sink| {
            let bv = t.value(b);
            sink(a.0, zip(g, bv, |gv, d| gv / d));
            let av = t.value(a);
            let mut dv = Tensor::zeros_like(g);
            for (((dst, &gv), &x), &y) in dv
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(av.data())
                .zip(bv.data())
            {
                *dst = -gv * x / (y * y);
            }
            sink(b.0, dv);
        })
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, &[a], move |_, g, sink| {
            sink(a.0, g.map(|v| v * c));
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, &[a], move |_, g, sink| {
            sink(a.0, g.clone());
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = map_t(self.threads, self.value(a), |v| if v > E::ZERO { v } else { E::ZERO });
        self.push(value, &[a], move |t, g, sink| {
            sink(
                a.0,
                zip_t(t.threads, g, t.value(a), |gv, x| if x > E::ZERO { gv } else { E::ZERO }),
            );
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map_t(self.threads, self.value(a), sigmoid_scalar);
        let out_idx = self.nodes.len(); // index the new node will occupy
        self.push(value, &[a], move |t, g, sink| {
            // uses the stored output: d sigma = y (1 - y)
            let y = t.value(Var(out_idx));
            sink(a.0, zip_t(t.threads, g, y, |gv, yv| gv * yv * (E::ONE - yv)));
        })
    }

    /// Elementwise binary cross-entropy from logits against a constant
    /// target, the numerically stable `max(z,0) - z*t + ln(1+exp(-|z|))`.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<E>) -> Var {
        assert_eq!(self.value(z).shape(), target.shape(), "bce target shape");
        let value = zip(self.value(z), target, |zv, tv| {
            let pos = if zv > E::ZERO { zv } else { E::ZERO };
            pos - zv * tv + (E::ONE + (-zv.abs()).exp()).ln()
        });
        let target = target.clone();
        self.push(value, &[z], move |t, g, sink| {
            let zv = t.value(z);
            let mut d = Tensor::zeros_like(g);
            for ((dst, (&gv, &zz)), &tv) in d
                .data_mut()
                .iter_mut()
                .zip(g.data().iter().zip(zv.data()))
                .zip(target.data())
            {
                *dst = gv * (sigmoid_scalar(zz) - tv);
            }
            sink(z.0, d);
        })
    }
}

#[inline]
fn sigmoid_scalar<E: Elem>(v: E) -> E {
    E::ONE / (E::ONE + (-v).exp())
}

fn zip<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data)
}

/// Thread-aware elementwise binary map; identical results on every path.
fn zip_t<E: Elem>(
    threads: usize,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E + Sync + Send,
) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    if threads <= 1 || a.numel() < PAR_ELEMWISE_MIN {
        return zip(a, b, f);
    }
    let data = a
        .data()
        .par_iter()
        .zip(b.data().par_iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

/// Thread-aware elementwise unary map.
fn map_t<E: Elem>(threads: usize, a: &Tensor<E>, f: impl Fn(E) -> E + Sync + Send) -> Tensor<E> {
    if threads <= 1 || a.numel() < PAR_ELEMWISE_MIN {
        return a.map(f);
    }
    let data = a.data().par_iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape(), data)
}

// ---------------------------------------------------------------------------
// Structural / reduction primitives
// ---------------------------------------------------------------------------

impl<E: Elem> Tape<E> {
    /// Sum every element into a `(1,)` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = E::ZERO;
        for &v in self.value(a).data() {
            s += v;
        }
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::scalar(s), &[a], move |_, g, sink| {
            sink(a.0, Tensor::full(&shape, g.item()));
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, E::ONE / E::from_f64(n as f64))
    }

    /// `(N, ...) -> (N,)`: sum over everything but the batch axis.
    pub fn sum_per_image(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let n = val.shape()[0];
        let per = val.numel() / n;
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            let mut s = E::ZERO;
            for &v in &val.data()[i * per..(i + 1) * per] {
                s += v;
            }
            out.data_mut()[i] = s;
        }
        let shape = val.shape().to_vec();
        self.push(out, &[a], move |_, g, sink| {
            let mut d = Tensor::zeros(&shape);
            let per = d.numel() / g.numel();
            for (i, &gv) in g.data().iter().enumerate() {
                for v in d.data_mut()[i * per..(i + 1) * per].iter_mut() {
                    *v = gv;
                }
            }
            sink(a.0, d);
        })
    }

    /// Per-batch inner product of two `(N, C, H, W)` maps, flattened:
    /// the holistic-correlation scalar. Output shape `(N,)`.
    pub fn batch_dot(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "batch_dot");
        let (n, ..) = self.value(a).dims4();
        let per = self.value(a).numel() / n;
        let mut out = Tensor::zeros(&[n]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let mut s = E::ZERO;
                for j in i * per..(i + 1) * per {
                    s += av[j] * bv[j];
                }
                out.data_mut()[i] = s;
            }
        }
        self.push(out, &[a, b], move |t, g, sink| {
            let av = t.value(a);
            let bv = t.value(b);
            let mut da = Tensor::zeros_like(av);
            let mut db = Tensor::zeros_like(bv);
            for (i, &gv) in g.data().iter().enumerate() {
                for j in i * per..(i + 1) * per {
                    da.data_mut()[j] = gv * bv.data()[j];
                    db.data_mut()[j] = gv * av.data()[j];
                }
            }
            sink(a.0, da);
            sink(b.0, db);
        })
    }

    /// Broadcast-multiply a `(N, C, H, W)` map by a per-batch scalar `(N,)`.
    #[allow(clippy::needless_range_loop)]
    pub fn batch_scale(&mut self, x: Var, s: Var) -> Var {
        let (n, ..) = self.value(x).dims4();
        assert_eq!(self.value(s).shape(), [n], "batch_scale scalar shape");
        let per = self.value(x).numel() / n;
        let mut out = Tensor::zeros_like(self.value(x));
        {
            let xv = self.value(x).data();
            let sv = self.value(s).data();
            for i in 0..n {
                let si = sv[i];
                for j in i * per..(i + 1) * per {
                    out.data_mut()[j] = xv[j] * si;
                }
            }
        }
        self.push(out, &[x, s], move |t, g, sink| {
            let xv = t.value(x);
            let sv = t.value(s);
            let mut dx = Tensor::zeros_like(xv);
            let mut ds = Tensor::zeros(&[n]);
            for i in 0..n {
                let si = sv.data()[i];
                let mut acc = E::ZERO;
                for j in i * per..(i + 1) * per {
                    dx.data_mut()[j] = g.data()[j] * si;
                    acc += g.data()[j] * xv.data()[j];
                }
                ds.data_mut()[i] = acc;
            }
            sink(x.0, dx);
            sink(s.0, ds);
        })
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4();
            assert_eq!((xn, xh, xw), (n, h, w), "concat_channels spatial/batch mismatch");
            channels.push(xc);
        }
        let c_total: usize = channels.iter().sum();
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        let hw = h * w;
        {
            let od = out.data_mut();
            let mut c_off = 0;
            for (&x, &c) in xs.iter().zip(&channels) {
                let xd = self.nodes[x.0].value.data();
                for i in 0..n {
                    let src = &xd[i * c * hw..(i + 1) * c * hw];
                    let dst = &mut od[(i * c_total + c_off) * hw..(i * c_total + c_off + c) * hw];
                    dst.copy_from_slice(src);
                }
                c_off += c;
            }
        }
        let parents: Vec<Var> = xs.to_vec();
        let chans = channels.clone();
        self.push(out, xs, move |_, g, sink| {
            let mut c_off = 0;
            for (&p, &c) in parents.iter().zip(&chans) {
                let mut d = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    let src = &g.data()[(i * c_total + c_off) * hw..(i * c_total + c_off + c) * hw];
                    d.data_mut()[i * c * hw..(i + 1) * c * hw].copy_from_slice(src);
                }
                sink(p.0, d);
                c_off += c;
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Spatial primitives
// ---------------------------------------------------------------------------

impl<E: Elem> Tape<E> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let threads = self.threads;
        let recording = self.grad_enabled
            && (self.nodes[x.0].needs_grad
                || self.nodes[w.0].needs_grad
                || b.is_some_and(|b| self.nodes[b.0].needs_grad));
        let (value, cols) = conv2d_forward_cached(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
            threads,
            recording,
        );
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push(value, &parents, move |t, g, sink| {
            let need_dx = t.nodes[x.0].needs_grad;
            let need_db = b.is_some_and(|b| t.nodes[b.0].needs_grad);
            let grads = conv2d_backward_cached(
                t.value(x),
                t.value(w),
                g,
                &spec,
                cols.as_ref(),
                need_dx,
                need_db,
                t.threads,
            );
            if let Some(dx) = grads.dx {
                sink(x.0, dx);
            }
            sink(w.0, grads.dw);
            if let (Some(b), Some(db)) = (b, grads.db) {
                sink(b.0, db);
            }
        })
    }

    /// Group normalization with affine parameters; `gamma`/`beta` are `(C,)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        self.group_norm_impl(x, gamma, beta, groups, eps, false)
    }

    /// Group normalization fused with a trailing ReLU; one stored tensor
    /// instead of two.
    pub fn group_norm_relu(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        self.group_norm_impl(x, gamma, beta, groups, eps, true)
    }

    #[allow(clippy::needless_range_loop, clippy::type_complexity)]
    fn group_norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
        relu: bool,
    ) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(self.value(gamma).shape(), [c]);
        assert_eq!(self.value(beta).shape(), [c]);
        let cg = c / groups;
        let hw = h * w;
        let m = cg * hw; // elements per group
        let inv_m = E::ONE / E::from_f64(m as f64);
        let eps = E::from_f64(eps);
        let sample = c * hw;

        let mut value = Tensor::zeros_like(self.value(x));
        // (mean, inv_std) per (n, group); cached for the backward pass
        let mut stats = vec![(E::ZERO, E::ZERO); n * groups];
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let tasks: Vec<(usize, &mut [E], &mut [(E, E)])> = value
                .data_mut()
                .chunks_mut(sample)
                .zip(stats.chunks_mut(groups))
                .enumerate()
                .map(|(i, (out, st))| (i, out, st))
                .collect();
            parallel::for_each_task(tasks, self.threads, |(i, out, st)| {
                let x_i = &xv[i * sample..(i + 1) * sample];
                for g in 0..groups {
                    let span = g * m..(g + 1) * m;
                    let mut mean = E::ZERO;
                    for &v in &x_i[span.clone()] {
                        mean += v;
                    }
                    mean *= inv_m;
                    let mut var = E::ZERO;
                    for &v in &x_i[span.clone()] {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_m;
                    let inv_std = E::ONE / (var + eps).sqrt();
                    st[g] = (mean, inv_std);
                    for k in 0..cg {
                        let ch = g * cg + k;
                        let scale = inv_std * gv[ch];
                        let shift = bv[ch] - mean * scale;
                        let dst = &mut out[ch * hw..(ch + 1) * hw];
                        let src = &x_i[ch * hw..(ch + 1) * hw];
                        if relu {
                            for (o, &v) in dst.iter_mut().zip(src) {
                                let y = v * scale + shift;
                                *o = if y > E::ZERO { y } else { E::ZERO };
                            }
                        } else {
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o = v * scale + shift;
                            }
                        }
                    }
                }
            });
        }
        let out_idx = self.nodes.len(); // index the new node will occupy
        self.push(value, &[x, gamma, beta], move |t, gout_raw, sink| {
            let xv = t.value(x).data();
            let gam = t.value(gamma).data();
            // Gate the incoming gradient by the rectifier when fused.
            let gated;
            let gv = if relu {
                gated = zip_t(t.threads, gout_raw, t.value(Var(out_idx)), |g, y| {
                    if y > E::ZERO {
                        g
                    } else {
                        E::ZERO
                    }
                });
                gated.data()
            } else {
                gout_raw.data()
            };
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            // Per-sample partial gamma/beta gradients, summed in batch order.
            struct Part<E> {
                dgamma: Vec<E>,
                dbeta: Vec<E>,
            }
            let mut parts: Vec<Part<E>> = Vec::with_capacity(n);
            {
                let tasks: Vec<(usize, &mut [E])> =
                    dx.data_mut().chunks_mut(sample).enumerate().collect();
                let computed: Vec<Part<E>> =
                    parallel::map_indexed(n, t.threads, |i| {
                        let x_i = &xv[i * sample..(i + 1) * sample];
                        let g_i = &gv[i * sample..(i + 1) * sample];
                        let mut dgamma = vec![E::ZERO; c];
                        let mut dbeta = vec![E::ZERO; c];
                        for g in 0..groups {
                            let (mean, inv_std) = stats[i * groups + g];
                            for k in 0..cg {
                                let ch = g * cg + k;
                                let mut dg = E::ZERO;
                                let mut db = E::ZERO;
                                for (&go, &v) in
                                    g_i[ch * hw..(ch + 1) * hw].iter().zip(&x_i[ch * hw..(ch + 1) * hw])
                                {
                                    dg += go * (v - mean) * inv_std;
                                    db += go;
                                }
                                dgamma[ch] = dg;
                                dbeta[ch] = db;
                            }
                        }
                        Part { dgamma, dbeta }
                    });
                parts.extend(computed);
                parallel::for_each_chunk(tasks, t.threads, |i, dx_i| {
                    let x_i = &xv[i * sample..(i + 1) * sample];
                    let g_i = &gv[i * sample..(i + 1) * sample];
                    for g in 0..groups {
                        let (mean, inv_std) = stats[i * groups + g];
                        let mut sum_dxhat = E::ZERO;
                        let mut sum_dxhat_xhat = E::ZERO;
                        for k in 0..cg {
                            let ch = g * cg + k;
                            let gamma_ch = gam[ch];
                            for (&go, &v) in
                                g_i[ch * hw..(ch + 1) * hw].iter().zip(&x_i[ch * hw..(ch + 1) * hw])
                            {
                                let dxhat = go * gamma_ch;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * (v - mean) * inv_std;
                            }
                        }
                        let mean_dxhat = sum_dxhat * inv_m;
                        let mean_dxhat_xhat = sum_dxhat_xhat * inv_m;
                        for k in 0..cg {
                            let ch = g * cg + k;
                            let gamma_ch = gam[ch];
                            for ((d, &go), &v) in dx_i[ch * hw..(ch + 1) * hw]
                                .iter_mut()
                                .zip(&g_i[ch * hw..(ch + 1) * hw])
                                .zip(&x_i[ch * hw..(ch + 1) * hw])
                            {
                                let xhat = (v - mean) * inv_std;
                                *d = inv_std
                                    * (go * gamma_ch - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                });
            }
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            for part in &parts {
                for (acc, v) in dgamma.data_mut().iter_mut().zip(&part.dgamma) {
                    *acc += *v;
                }
                for (acc, v) in dbeta.data_mut().iter_mut().zip(&part.dbeta) {
                    *acc += *v;
                }
            }
            sink(x.0, dx);
            sink(gamma.0, dgamma);
            sink(beta.0, dbeta);
        })
    }

    /// Non-overlapping 2x2 max pooling; ties resolve to the first element in
    /// scan order (top-left first).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut value = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax: Vec<u32> = vec![0; n * c * oh * ow];
        {
            let xv = self.value(x).data();
            let mut o = 0;
            for i in 0..n {
                for ch in 0..c {
                    let plane = (i * c + ch) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                            let mut best = xv[best_idx];
                            for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                                let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                            value.data_mut()[o] = best;
                            argmax[o] = best_idx as u32;
                            o += 1;
                        }
                    }
                }
            }
        }
        self.push(value, &[x], move |_, g, sink| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (o, &src) in argmax.iter().enumerate() {
                dx.data_mut()[src as usize] += g.data()[o];
            }
            sink(x.0, dx);
        })
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let taps_y = bilinear_taps(h, oh);
        let taps_x = bilinear_taps(w, ow);
        let mut value = Tensor::zeros(&[n, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let threads = self.threads;
            let chunks: Vec<(usize, &mut [E])> =
                value.data_mut().chunks_mut(c * oh * ow).enumerate().collect();
            let ty = &taps_y;
            let tx = &taps_x;
            parallel::for_each_chunk(chunks, threads, |i, out| {
                for ch in 0..c {
                    let plane = &xv[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let w00 = (E::ONE - wy) * (E::ONE - wx);
                            let w01 = (E::ONE - wy) * wx;
                            let w10 = wy * (E::ONE - wx);
                            let w11 = wy * wx;
                            dst[oy * ow + ox] = plane[y0 * w + x0] * w00
                                + plane[y0 * w + x1] * w01
                                + plane[y1 * w + x0] * w10
                                + plane[y1 * w + x1] * w11;
                        }
                    }
                }
            });
        }
        self.push(value, &[x], move |t, g, sink| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let chunks: Vec<(usize, &mut [E])> =
                dx.data_mut().chunks_mut(c * h * w).enumerate().collect();
            parallel::for_each_chunk(chunks, t.threads, |i, dx_i| {
                for ch in 0..c {
                    let src = &g.data()[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
                    let dst = &mut dx_i[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (E::ONE - wy) * (E::ONE - wx);
                            dst[y0 * w + x1] += gv * (E::ONE - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (E::ONE - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
            });
            sink(x.0, dx);
        })
    }
}

/// For each output coordinate: source indices `(i0, i1)` and the weight of
/// `i1`. Half-pixel centers, clamped at the edges (align_corners = false).
pub(crate) fn bilinear_taps<E: Elem>(src: usize, dst: usize) -> Vec<(usize, usize, E)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let clamped = center.max(0.0);
            let i0 = (clamped.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = (clamped - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, E::from_f64(frac))
        })
        .collect()
}
