//! Desk-scale training: AdamW, label-smoothed cross-entropy, cosine schedule
//! with warm-up, global-norm clipping, synthetic data and a linear probe.

mod adamw;
mod data;
mod trainer;

pub use adamw::{adamw_update, AdamW};
pub use data::{linear_probe, synth_dataset, Dataset, DatasetKind};
pub use trainer::{evaluate, recalibrate_bn, train, Metrics, TrainOutcome};

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight EMA is not supported; any value is rejected by `validate`.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    /// The desk-scale recipe: AdamW at 3e-3 peak, cosine decay, label
    /// smoothing 0.1, clipping at 1.0, weight decay 0.05.
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            min_lr: 1e-5,
            warmup_steps: 25,
            total_steps: 500,
            batch_size: 32,
            label_smoothing: 0.1,
            grad_clip_norm: 1.0,
            weight_decay: 0.05,
            seed: 0,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ema_decay.is_some() {
            return Err(Error::Unsupported("weight EMA is not implemented".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::config("need 0 <= min_lr <= peak_lr"));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config("grad_clip_norm must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.peak_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress)) / 2.0
}

/// Mean over the batch of `−Σ target · log_softmax(logits)` with
/// `target = (1−α)·onehot + α/K`.
pub fn label_smoothed_ce<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dim("label_smoothed_ce", &s, &[labels.len()]));
    }
    let (n, k) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let off = alpha / k as f64;
    let on = 1.0 - alpha + off;
    let target = Tensor::from_fn(&[n, k], |i| T::of(if labels[i / k] == i % k { on } else { off }));
    let target = tape.constant(target);
    let logp = tape.log_softmax(logits, 1)?;
    let prod = tape.mul(logp, target)?;
    let total = tape.sum_all(prod)?;
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Entropy of the smoothed target, the lower bound of the smoothed loss.
pub fn smoothed_target_entropy(k: usize, alpha: f64) -> f64 {
    let off = alpha / k as f64;
    let on = 1.0 - alpha + off;
    let term = |p: f64| if p > 0.0 { -p * libm::log(p) } else { 0.0 };
    term(on) + (k - 1) as f64 * term(off)
}

/// Fraction of rows whose first arg-max matches the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    libm::sqrt(grads.iter().map(|g| g.sq_norm().f64()).sum())
}

/// Rescales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`; otherwise leaves them untouched. Returns the pre-clip
/// norm.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
