//! Adaptive-moment optimizer with decoupled weight decay (AdamW).
//!
//! The decay is applied directly to the parameters, never folded into the
//! gradient: `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.

use crate::params::ParamStore;
use crate::tensor::{Elem, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub struct AdamW<E: Elem> {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Elem> AdamW<E> {
    pub fn new(store: &ParamStore<E>, lr: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// One update over the whole store; `grads` is indexed like the store
    /// and `None` entries count as zero gradient.
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &[Option<Tensor<E>>]) {
        assert_eq!(grads.len(), store.len(), "gradient vector length");
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(ADAM_BETA1);
        let b2 = E::from_f64(ADAM_BETA2);
        let one_minus_b1 = E::from_f64(1.0 - ADAM_BETA1);
        let one_minus_b2 = E::from_f64(1.0 - ADAM_BETA2);
        let corr1 = E::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(t)));
        let corr2 = E::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(t)));
        let lr = E::from_f64(self.lr);
        let wd = E::from_f64(self.lr * self.weight_decay);
        let eps = E::from_f64(ADAM_EPS);

        for idx in 0..grads.len() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let grad = grads[idx].as_ref();
            let param_id = crate::params::PId::from_index(idx);
            let param = store.value_mut(param_id);
            for j in 0..param.numel() {
                let g = grad.map_or(E::ZERO, |g| g.data()[j]);
                let mj = b1 * m.data()[j] + one_minus_b1 * g;
                let vj = b2 * v.data()[j] + one_minus_b2 * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj * corr1;
                let v_hat = vj * corr2;
                let p = param.data()[j];
                param.data_mut()[j] = p - lr * m_hat / (v_hat.sqrt() + eps) - wd * p;
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<E: Elem>(grads: &mut [Option<Tensor<E>>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            sq += v.to_f64() * v.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = E::from_f64(max_norm / norm);
    for g in grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
}
