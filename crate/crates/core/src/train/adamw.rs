use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::params::Entry;
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// One decoupled-decay Adam update of a flat slice, with bias correction.
/// `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let c1 = 1.0 - libm::pow(beta1, step as f64);
    let c2 = 1.0 - libm::pow(beta2, step as f64);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (lr_t, eps_t, wd) = (T::of(lr), T::of(eps), T::of(weight_decay));
    let (inv_c1, inv_c2) = (T::of(1.0 / c1), T::of(1.0 / c2));
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] * inv_c1;
        let vh = v[i] * inv_c2;
        theta[i] -= lr_t * (mh / (vh.sqrt() + eps_t) + wd * theta[i]);
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self, index: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match (self.m.get(index)?, self.v.get(index)?) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Updates every trainable tensor from its accumulated gradient (a missing
    /// gradient counts as zero). Decay applies to weight kernels only. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for e in store.entries() {
            if let Some(g) = &e.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite(alloc::format!("gradient of {}", e.spec.name)));
                }
            }
        }
        let n = store.len();
        self.m.resize_with(n, || None);
        self.v.resize_with(n, || None);
        self.step += 1;
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable() {
                continue;
            }
            let Entry { spec, value, grad } = e;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&spec.shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&spec.shape));
            let zeros;
            let g = match grad {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(&spec.shape);
                    &zeros
                }
            };
            let wd = if spec.role.decays() { self.weight_decay } else { 0.0 };
            adamw_update(
                Arc::make_mut(value).data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
                self.step,
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                wd,
            );
        }
        Ok(())
    }
}
