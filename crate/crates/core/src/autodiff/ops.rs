//! Forward evaluation of the differentiable primitives.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{check_shape, numel, strides, Tensor, MAX_RANK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// How the right operand of a binary op maps onto the left operand's layout.
///
/// Only the right operand broadcasts: either a rank-1 channel vector against
/// the trailing axis, or a same-rank tensor whose extents are 1 or equal.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// `b` repeats with period `b.len()`.
    Suffix(usize),
    /// `b[i / inner]`.
    Prefix(usize),
    General {
        dims: [usize; MAX_RANK],
        bstrides: [usize; MAX_RANK],
    },
}

impl Broadcast {
    pub(crate) fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let mut bn: Vec<usize> = b.to_vec();
        if b.len() == 1 && a.len() > 1 && Some(&b[0]) == a.last() {
            bn = vec![1; a.len()];
            *bn.last_mut().unwrap() = b[0];
        }
        if bn.len() != a.len() || bn.iter().zip(a).any(|(&x, &y)| x != 1 && x != y) {
            return Err(Error::dim("broadcast", a, b));
        }
        if bn.as_slice() == a {
            return Ok(Broadcast::Same);
        }
        let first = bn.iter().position(|&d| d != 1);
        let last = bn.iter().rposition(|&d| d != 1);
        match (first, last) {
            (None, _) | (_, None) => return Ok(Broadcast::Suffix(1)),
            (Some(f), Some(l)) => {
                if bn[f..] == a[f..] {
                    return Ok(Broadcast::Suffix(numel(&bn)));
                }
                if bn[..=l] == a[..=l] {
                    return Ok(Broadcast::Prefix(numel(&a[l + 1..])));
                }
            }
        }
        let pad = MAX_RANK - a.len();
        let mut dims = [1; MAX_RANK];
        let mut bshape = [1; MAX_RANK];
        dims[pad..].copy_from_slice(a);
        bshape[pad..].copy_from_slice(&bn);
        let bs = strides(&bshape);
        let mut bstrides = [0; MAX_RANK];
        for i in 0..MAX_RANK {
            bstrides[i] = if bshape[i] == 1 { 0 } else { bs[i] };
        }
        Ok(Broadcast::General { dims, bstrides })
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(p) => i % p,
            Broadcast::Prefix(inner) => i / inner,
            Broadcast::General { dims, bstrides } => {
                let mut rem = i;
                let mut out = 0;
                for ax in (0..MAX_RANK).rev() {
                    let d = rem % dims[ax];
                    rem /= dims[ax];
                    out += d * bstrides[ax];
                }
                out
            }
        }
    }
}

pub(crate) fn pad4(shape: &[usize]) -> [usize; MAX_RANK] {
    let mut d = [1; MAX_RANK];
    d[MAX_RANK - shape.len()..].copy_from_slice(shape);
    d
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn hard_swish_scalar<T: Real>(x: T) -> T {
    let r = (x + T::of(3.0)).max(T::zero()).min(T::of(6.0));
    x * r / T::of(6.0)
}

impl<T: Real> Tape<T> {
    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::plan(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match (&plan, op) {
            (Broadcast::Same, BinaryOp::Add) => ad.iter().zip(bd).map(|(&x, &y)| x + y).collect(),
            (Broadcast::Same, BinaryOp::Sub) => ad.iter().zip(bd).map(|(&x, &y)| x - y).collect(),
            (Broadcast::Same, BinaryOp::Mul) => ad.iter().zip(bd).map(|(&x, &y)| x * y).collect(),
            (_, op) => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[plan.index(i)];
                    match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                    }
                })
                .collect(),
        };
        let out = Tensor::raw(av.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary(op, a, b, plan), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * T::of(s));
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + T::of(c));
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// `[.., m, k] × [.., k, n]` with identical leading (batch) extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            kernels::gemm_nn(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::raw(shape, out), Op::MatMul(a, b), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = Tensor::raw(shape.to_vec(), self.value(x).data().to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = permute_tensor(self.value(x), perm)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    fn check_stride(stride: usize, kh: usize, kw: usize) -> Result<()> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Unsupported(format!("stride {stride} (expected 1 or 2)")));
        }
        // Even kernels only as non-overlapping patchify (k == stride).
        let ok = |k: usize| k % 2 == 1 || k == stride;
        if !ok(kh) || !ok(kw) {
            return Err(Error::Unsupported(format!(
                "kernel {kh}x{kw} with stride {stride}"
            )));
        }
        Ok(())
    }

    /// SAME-padded NHWC convolution with a `[kh, kw, cin, cout]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        Self::check_stride(stride, sw[0], sw[1])?;
        let g = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], sw[1], stride);
        let cout = sw[3];
        let mut y = vec![T::zero(); g.n * g.oh * g.ow * cout];
        kernels::conv2d_fwd(&g, self.value(x).data(), self.value(w).data(), cout, &mut y);
        let out = Tensor::raw(vec![g.n, g.oh, g.ow, cout], y);
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d(x, w, g), rg))
    }

    /// SAME-padded per-channel convolution with a `[kh, kw, c]` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 3 || sx[3] != sw[2] {
            return Err(Error::dim("depthwise_conv2d", &sx, &sw));
        }
        Self::check_stride(stride, sw[0], sw[1])?;
        let g = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], sw[0], sw[1], stride);
        let mut y = vec![T::zero(); g.n * g.oh * g.ow * g.cin];
        kernels::dwconv_fwd(&g, self.value(x).data(), self.value(w).data(), &mut y);
        let out = Tensor::raw(vec![g.n, g.oh, g.ow, g.cin], y);
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::DwConv2d(x, w, g), rg))
    }

    /// SAME average pooling; border windows average their in-bounds taps only.
    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim("avg_pool", &sx, &[k, k]));
        }
        let g = ConvGeom::new(sx[0], sx[1], sx[2], sx[3], k, k, stride);
        let mut y = vec![T::zero(); g.n * g.oh * g.ow * g.cin];
        kernels::avgpool_fwd(&g, self.value(x).data(), &mut y);
        let out = Tensor::raw(vec![g.n, g.oh, g.ow, g.cin], y);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool(x, g), rg))
    }

    /// Reduction keeping reduced axes with extent 1.
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut mask = [false; MAX_RANK];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::Axis { axis: ax, rank });
            }
            mask[MAX_RANK - rank + ax] = true;
        }
        let dims = pad4(&shape);
        let mut odims = dims;
        for i in 0..MAX_RANK {
            if mask[i] {
                odims[i] = 1;
            }
        }
        let count: usize = (0..MAX_RANK).filter(|&i| mask[i]).map(|i| dims[i]).product();
        let ostr = strides(&odims);
        let xd = self.value(x).data();
        let onum = numel(&odims);
        let init = if op == ReduceOp::Max { T::neg_infinity() } else { T::zero() };
        let mut acc = vec![init; onum];
        let mut argmax = if op == ReduceOp::Max { vec![0usize; onum] } else { Vec::new() };
        let mut i = 0;
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for d in 0..dims[3] {
                        let idx = [a, b, c, d];
                        let mut o = 0;
                        for ax in 0..MAX_RANK {
                            if !mask[ax] {
                                o += idx[ax] * ostr[ax];
                            }
                        }
                        let v = xd[i];
                        match op {
                            ReduceOp::Sum | ReduceOp::Mean => acc[o] += v,
                            ReduceOp::Max => {
                                if v > acc[o] {
                                    acc[o] = v;
                                    argmax[o] = i;
                                }
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
        if op == ReduceOp::Mean {
            let inv = T::one() / T::of(count as f64);
            for v in &mut acc {
                *v *= inv;
            }
        }
        let oshape: Vec<usize> = odims[MAX_RANK - rank..].to_vec();
        let out = Tensor::raw(oshape, acc);
        let rg = self.rg(&[x]);
        let saved = (op == ReduceOp::Max).then_some(argmax);
        Ok(self.push(out, Op::Reduce(x, op, mask, saved), rg))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceOp::Sum, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceOp::Mean, axes)
    }

    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceOp::Max, axes)
    }

    /// Sum over every axis, reshaped to `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_impl(x, axis, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_impl(x, axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), rg))
    }

    fn softmax_impl(&self, x: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(xd[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - m).exp();
                    y[at(j)] = e;
                    s += e;
                }
                if log {
                    let lse = s.ln();
                    for j in 0..len {
                        y[at(j)] = xd[at(j)] - m - lse;
                    }
                } else {
                    let inv = T::one() / s;
                    for j in 0..len {
                        y[at(j)] *= inv;
                    }
                }
            }
        }
        Ok(Tensor::raw(shape.to_vec(), y))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    /// `x·Φ(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn hard_swish(&mut self, x: Var) -> Var {
        self.unary(x, hard_swish_scalar, Op::HardSwish(x))
    }

    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / v.sqrt(), Op::Rsqrt(x))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let n = self.value(x).len();
        if numel(shape) != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::dim("gather", self.shape(x), shape));
        }
        let xd = self.value(x).data();
        let data = index.iter().map(|&i| xd[i]).collect();
        let out = Tensor::raw(shape.to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, index), rg))
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = [false; MAX_RANK];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::Shape {
            shape: shape.to_vec(),
            reason: format!("invalid permutation {perm:?}"),
        });
    }
    let istr = strides(shape);
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Strides of the input, indexed by output axis; padded to rank 4.
    let pad = MAX_RANK - rank;
    let mut od = [1; MAX_RANK];
    let mut st = [0; MAX_RANK];
    for (j, &p) in perm.iter().enumerate() {
        od[pad + j] = shape[p];
        st[pad + j] = istr[p];
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    for a in 0..od[0] {
        for b in 0..od[1] {
            for c in 0..od[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                if st[3] == 1 {
                    out.extend_from_slice(&xd[base..base + od[3]]);
                } else {
                    for d in 0..od[3] {
                        out.push(xd[base + d * st[3]]);
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(oshape, out))
}
