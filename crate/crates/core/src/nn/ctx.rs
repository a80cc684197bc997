//! Per-forward execution context: tape, parameter bindings, mode, and trace.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::autodiff::{OpKind, Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::rng::{stream, Stream, StreamRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape-level record of a forward pass, for structural assertions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub path: String,
    pub what: &'static str,
    pub shape: Vec<usize>,
}

pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    grad_filter: Option<Vec<bool>>,
    mode: Mode,
    drop_path: bool,
    drop_rng: StreamRng,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
    batch_stats: Vec<(ParamId, Tensor<T>)>,
    trace: Vec<TraceEvent>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            grad_filter: None,
            mode,
            drop_path: true,
            drop_rng: stream(seed, Stream::DropPath),
            stat_updates: Vec::new(),
            batch_stats: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.tape.inject_fault(fault);
        self
    }

    /// Only the listed parameters get gradients; the rest bind as constants.
    pub fn with_grads_only(mut self, ids: &[ParamId]) -> Self {
        let mut keep = vec![false; self.params.len()];
        for id in ids {
            keep[id.0] = true;
        }
        self.grad_filter = Some(keep);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Binds a parameter to the tape, once per context.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let wanted = self.grad_filter.as_ref().is_none_or(|k| k[id.0]);
        let v = self.tape.leaf_shared(e.value.clone(), e.trainable() && wanted);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn param_value(&self, id: ParamId) -> &'a Tensor<T> {
        self.params.value(id)
    }

    /// Turns stochastic depth off even in train mode, for finite differences.
    pub fn disable_drop_path(&mut self) {
        self.drop_path = false;
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tape.shape(v)
    }

    /// Per-sample keep decisions for a residual branch.
    pub fn draw_keep(&mut self, n: usize, survival: f64) -> Vec<bool> {
        (0..n).map(|_| self.drop_rng.random::<f64>() < survival).collect()
    }

    /// Inverted-scaling stochastic depth mask `[n,1,1,1]`, or `None` when the
    /// branch passes through unchanged.
    pub fn drop_mask(&mut self, n: usize, survival: f64) -> Option<Var> {
        if !self.training() || !self.drop_path || survival >= 1.0 {
            return None;
        }
        let keep = self.draw_keep(n, survival);
        let inv = T::of(1.0 / survival);
        let t = Tensor::from_fn(&[n, 1, 1, 1], |i| if keep[i] { inv } else { T::zero() });
        Some(self.tape.constant(t))
    }

    pub fn apply_mask(&mut self, branch: Var, mask: Option<Var>) -> Result<Var> {
        match mask {
            Some(m) => self.tape.mul(branch, m),
            None => Ok(branch),
        }
    }

    pub(crate) fn push_stat_update(&mut self, id: ParamId, t: Tensor<T>) {
        self.stat_updates.push((id, t));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        core::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn push_batch_stat(&mut self, id: ParamId, t: Tensor<T>) {
        self.batch_stats.push((id, t));
    }

    /// Raw train-mode batch statistics, keyed by the running-stat parameter
    /// they estimate. Unlike [`Ctx::take_stat_updates`] no EMA is applied.
    pub fn take_batch_stats(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        core::mem::take(&mut self.batch_stats)
    }

    pub fn record(&mut self, path: &str, what: &'static str, shape: &[usize]) {
        self.trace.push(TraceEvent {
            path: path.into(),
            what,
            shape: shape.to_vec(),
        });
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient of one parameter, if it was bound and reached by backward.
    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound[id.0].and_then(|v| self.tape.grad(v))
    }

    /// Gradients of every bound trainable parameter reached by backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }
}
