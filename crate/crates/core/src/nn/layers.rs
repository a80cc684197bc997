//! Parameterized layers. Each layer only holds parameter ids plus geometry,
//! so the same description serves the forward pass and the cost walk.

use alloc::format;
use alloc::string::String;

use super::ctx::Ctx;
use super::params::{ParamBuilder, ParamId, Role};
use crate::analysis::CostSink;
use crate::autodiff::{same_padding, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const LN_EPS: f64 = 1e-5;

/// Spatial extent seen by a layer during the cost walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hw {
    pub h: usize,
    pub w: usize,
}

impl Hw {
    pub fn square(s: usize) -> Self {
        Hw { h: s, w: s }
    }

    pub fn area(self) -> usize {
        self.h * self.w
    }

    pub fn strided(self, stride: usize) -> Self {
        Hw {
            h: same_padding(self.h, 1, stride).0,
            w: same_padding(self.w, 1, stride).0,
        }
    }
}

fn join(path: &str, leaf: &str) -> String {
    format!("{path}.{leaf}")
}

fn check_channels<T: Real>(cx: &Ctx<'_, T>, x: Var, c: usize, op: &'static str) -> Result<()> {
    let s = cx.shape(x);
    if s.last() != Some(&c) {
        return Err(Error::dim(op, s, &[c]));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub path: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Dense {
    pub fn declare(pb: &mut ParamBuilder, path: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let w = pb.declare(join(path, "weight"), &[cin, cout], Role::Weight)?;
        let b = if bias {
            Some(pb.declare(join(path, "bias"), &[cout], Role::Bias)?)
        } else {
            None
        };
        Ok(Dense {
            path: path.into(),
            w,
            b,
            cin,
            cout,
        })
    }

    pub fn params(&self) -> usize {
        self.cin * self.cout + if self.b.is_some() { self.cout } else { 0 }
    }

    /// Applies to the trailing axis of any rank-≥1 input.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.cin, "dense")?;
        let shape = cx.shape(x).to_vec();
        let rows = cx.value(x).len() / self.cin;
        let flat = cx.tape.reshape(x, &[rows, self.cin])?;
        let w = cx.param(self.w);
        let mut y = cx.tape.matmul(flat, w)?;
        if let Some(b) = self.b {
            let b = cx.param(b);
            y = cx.tape.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.cout;
        cx.tape.reshape(y, &out_shape)
    }

    pub fn cost(&self, sink: &mut CostSink, tokens: usize) {
        sink.row(&self.path, "dense", self.params(), tokens * self.cin * self.cout);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub path: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn declare(
        pb: &mut ParamBuilder,
        path: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = pb.declare(join(path, "weight"), &[k, k, cin, cout], Role::Weight)?;
        let b = if bias {
            Some(pb.declare(join(path, "bias"), &[cout], Role::Bias)?)
        } else {
            None
        };
        Ok(Conv2d {
            path: path.into(),
            w,
            b,
            k,
            cin,
            cout,
            stride,
        })
    }

    pub fn params(&self) -> usize {
        self.k * self.k * self.cin * self.cout + if self.b.is_some() { self.cout } else { 0 }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.cin, "conv2d")?;
        let w = cx.param(self.w);
        let mut y = cx.tape.conv2d(x, w, self.stride)?;
        if let Some(b) = self.b {
            let b = cx.param(b);
            y = cx.tape.add(y, b)?;
        }
        Ok(y)
    }

    pub fn cost(&self, sink: &mut CostSink, input: Hw) -> Hw {
        let out = input.strided(self.stride);
        let flops = out.area() * self.k * self.k * self.cin * self.cout;
        sink.row(&self.path, "conv", self.params(), flops);
        out
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub path: String,
    pub w: ParamId,
    pub k: usize,
    pub c: usize,
    pub stride: usize,
}

impl DepthwiseConv2d {
    pub fn declare(pb: &mut ParamBuilder, path: &str, k: usize, c: usize, stride: usize) -> Result<Self> {
        let w = pb.declare(join(path, "weight"), &[k, k, c], Role::Weight)?;
        Ok(DepthwiseConv2d {
            path: path.into(),
            w,
            k,
            c,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.c, "depthwise_conv2d")?;
        let w = cx.param(self.w);
        cx.tape.depthwise_conv2d(x, w, self.stride)
    }

    pub fn cost(&self, sink: &mut CostSink, input: Hw) -> Hw {
        let out = input.strided(self.stride);
        let p = self.k * self.k * self.c;
        sink.row(&self.path, "depthwise_conv", p, out.area() * p);
        out
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub path: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn declare(pb: &mut ParamBuilder, path: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            path: path.into(),
            gamma: pb.declare(join(path, "gamma"), &[c], Role::Gain)?,
            beta: pb.declare(join(path, "beta"), &[c], Role::Shift)?,
            mean: pb.declare(join(path, "running_mean"), &[c], Role::RunningMean)?,
            var: pb.declare(join(path, "running_var"), &[c], Role::RunningVar)?,
            c,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Batch statistics over N,H,W in train mode (queuing a running-stat
    /// update on the context), running statistics in eval mode.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.c, "batch_norm")?;
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.training() {
            let mu = cx.tape.mean(x, &[0, 1, 2])?;
            let xc = cx.tape.sub(x, mu)?;
            let sq = cx.tape.mul(xc, xc)?;
            let var = cx.tape.mean(sq, &[0, 1, 2])?;
            let ve = cx.tape.add_scalar(var, self.eps);
            let inv = cx.tape.rsqrt(ve);
            let xn = cx.tape.mul(xc, inv)?;
            let y = cx.tape.mul(xn, gamma)?;
            let y = cx.tape.add(y, beta)?;
            let m = T::of(self.momentum);
            let one_m = T::one() - m;
            let upd = |run: &Tensor<T>, batch: &Tensor<T>| {
                Tensor::from_fn(&[self.c], |i| m * run.data()[i] + one_m * batch.data()[i])
            };
            let new_mean = upd(cx.param_value(self.mean), cx.value(mu));
            let new_var = upd(cx.param_value(self.var), cx.value(var));
            cx.push_stat_update(self.mean, new_mean);
            cx.push_stat_update(self.var, new_var);
            let (bm, bv) = (cx.value(mu).clone(), cx.value(var).clone());
            cx.push_batch_stat(self.mean, bm.reshape(&[self.c])?);
            cx.push_batch_stat(self.var, bv.reshape(&[self.c])?);
            Ok(y)
        } else {
            let mean = cx.param(self.mean);
            let var = cx.param(self.var);
            let xc = cx.tape.sub(x, mean)?;
            let ve = cx.tape.add_scalar(var, self.eps);
            let inv = cx.tape.rsqrt(ve);
            let xn = cx.tape.mul(xc, inv)?;
            let y = cx.tape.mul(xn, gamma)?;
            cx.tape.add(y, beta)
        }
    }

    pub fn cost(&self, sink: &mut CostSink, input: Hw) {
        sink.row(&self.path, "batch_norm", 2 * self.c, input.area() * self.c);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub path: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn declare(pb: &mut ParamBuilder, path: &str, c: usize) -> Result<Self> {
        Ok(LayerNorm {
            path: path.into(),
            gamma: pb.declare(join(path, "gamma"), &[c], Role::Gain)?,
            beta: pb.declare(join(path, "beta"), &[c], Role::Shift)?,
            c,
            eps: LN_EPS,
        })
    }

    /// Normalizes each position over the trailing (channel) axis.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.c, "layer_norm")?;
        let last = cx.shape(x).len() - 1;
        let mu = cx.tape.mean(x, &[last])?;
        let xc = cx.tape.sub(x, mu)?;
        let sq = cx.tape.mul(xc, xc)?;
        let var = cx.tape.mean(sq, &[last])?;
        let ve = cx.tape.add_scalar(var, self.eps);
        let inv = cx.tape.rsqrt(ve);
        let xn = cx.tape.mul(xc, inv)?;
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let y = cx.tape.mul(xn, gamma)?;
        cx.tape.add(y, beta)
    }

    pub fn cost(&self, sink: &mut CostSink, input: Hw) {
        sink.row(&self.path, "layer_norm", 2 * self.c, input.area() * self.c);
    }
}

/// Squeeze-and-excitation: `x · σ(fc2(hard_swish(fc1(GAP(x)))))`.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub path: String,
    pub fc1: Dense,
    pub fc2: Dense,
    pub c: usize,
}

impl SqueezeExcite {
    pub fn declare(pb: &mut ParamBuilder, path: &str, c: usize, hidden: usize) -> Result<Self> {
        let hidden = hidden.max(1);
        Ok(SqueezeExcite {
            path: path.into(),
            fc1: Dense::declare(pb, &join(path, "fc1"), c, hidden, true)?,
            fc2: Dense::declare(pb, &join(path, "fc2"), hidden, c, true)?,
            c,
        })
    }

    pub fn gate<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(cx, x, self.c, "squeeze_excite")?;
        let n = cx.shape(x)[0];
        let pooled = cx.tape.mean(x, &[1, 2])?;
        let flat = cx.tape.reshape(pooled, &[n, self.c])?;
        let h = self.fc1.forward(cx, flat)?;
        let h = cx.tape.hard_swish(h);
        let g = self.fc2.forward(cx, h)?;
        let g = cx.tape.sigmoid(g);
        cx.tape.reshape(g, &[n, 1, 1, self.c])
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = self.gate(cx, x)?;
        cx.tape.mul(x, g)
    }

    pub fn cost(&self, sink: &mut CostSink, input: Hw) {
        let n = input.area() * self.c;
        sink.row(&join(&self.path, "pool"), "pool", 0, n);
        self.fc1.cost(sink, 1);
        sink.row(&join(&self.path, "hard_swish"), "activation", 0, self.fc1.cout);
        self.fc2.cost(sink, 1);
        sink.row(&join(&self.path, "sigmoid"), "activation", 0, self.c);
        sink.row(&join(&self.path, "scale"), "elementwise", 0, n);
    }
}

/// One-MAC-per-element row for parameter-free elementwise work.
pub fn elementwise_cost(sink: &mut CostSink, path: &str, kind: &'static str, input: Hw, c: usize) {
    sink.row(path, kind, 0, input.area() * c);
}

pub fn gelu_cost(sink: &mut CostSink, path: &str, input: Hw, c: usize) {
    elementwise_cost(sink, path, "activation", input, c);
}

/// 2×2 stride-2 average pool, charged per input element.
pub fn pool_cost(sink: &mut CostSink, path: &str, input: Hw, c: usize) -> Hw {
    elementwise_cost(sink, path, "pool", input, c);
    input.strided(2)
}

pub fn pool2<T: Real>(cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    cx.tape.avg_pool(x, 2, 2)
}
