//! Per-op vector-Jacobian products.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::ops::{pad4, permute_tensor, split_axis, Broadcast, BinaryOp, ReduceOp};
use super::{Op, Tape, Var};
use crate::real::Real;
use crate::tensor::{strides, Tensor, MAX_RANK};

fn reduce_to<T: Real>(g: &[T], plan: &Broadcast, shape: &[usize], sign: T) -> Tensor<T> {
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    match plan {
        Broadcast::Same => {
            for (o, &v) in od.iter_mut().zip(g) {
                *o = sign * v;
            }
        }
        _ => {
            for (i, &v) in g.iter().enumerate() {
                od[plan.index(i)] += sign * v;
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(super) fn backward_node(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b, plan) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let ga = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => {
                            let bd = bv.data();
                            let data = gd
                                .iter()
                                .enumerate()
                                .map(|(k, &gv)| gv * bd[plan.index(k)])
                                .collect();
                            Tensor::raw(av.shape().to_vec(), data)
                        }
                    };
                    out.push((a, ga));
                }
                if self.needs(b) {
                    let gb = match op {
                        BinaryOp::Add => reduce_to(gd, plan, bv.shape(), T::one()),
                        BinaryOp::Sub => reduce_to(gd, plan, bv.shape(), -T::one()),
                        BinaryOp::Mul => {
                            let prod: Vec<T> =
                                gd.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                            reduce_to(&prod, plan, bv.shape(), T::one())
                        }
                    };
                    out.push((b, gb));
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    out.push((*x, g.map(|v| v * T::of(*s))));
                }
            }
            Op::AddScalar(x) => {
                if self.needs(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a), self.value(b));
                let sa = av.shape();
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], bv.shape()[r - 1]);
                let batch = av.len() / (m * k);
                if self.needs(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..batch {
                        kernels::gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((a, Tensor::raw(sa.to_vec(), da)));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..batch {
                        kernels::gemm_tn(
                            &av.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((b, Tensor::raw(bv.shape().to_vec(), db)));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    out.push((*x, Tensor::raw(self.shape(*x).to_vec(), gd.to_vec())));
                }
            }
            Op::Permute(x, perm) => {
                if self.needs(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (j, &p) in perm.iter().enumerate() {
                        inv[p] = j;
                    }
                    let gx = permute_tensor(g, &inv).expect("inverse permutation is valid");
                    out.push((*x, gx));
                }
            }
            Op::Conv2d(x, w, geom) => {
                let (x, w) = (*x, *w);
                let (xv, wv) = (self.value(x), self.value(w));
                let cout = wv.shape()[3];
                let mut dx = self.needs(x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.needs(w).then(|| vec![T::zero(); wv.len()]);
                kernels::conv2d_bwd(
                    geom,
                    xv.data(),
                    wv.data(),
                    cout,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(d) = dx {
                    out.push((x, Tensor::raw(xv.shape().to_vec(), d)));
                }
                if let Some(d) = dw {
                    out.push((w, Tensor::raw(wv.shape().to_vec(), d)));
                }
            }
            Op::DwConv2d(x, w, geom) => {
                let (x, w) = (*x, *w);
                let (xv, wv) = (self.value(x), self.value(w));
                let mut dx = self.needs(x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.needs(w).then(|| vec![T::zero(); wv.len()]);
                kernels::dwconv_bwd(
                    geom,
                    xv.data(),
                    wv.data(),
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(d) = dx {
                    out.push((x, Tensor::raw(xv.shape().to_vec(), d)));
                }
                if let Some(d) = dw {
                    out.push((w, Tensor::raw(wv.shape().to_vec(), d)));
                }
            }
            Op::AvgPool(x, geom) => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    kernels::avgpool_bwd(geom, gd, &mut dx);
                    out.push((*x, Tensor::raw(xs, dx)));
                }
            }
            Op::Reduce(x, op, mask, argmax) => {
                if self.needs(*x) {
                    out.push((*x, self.reduce_grad(*x, *op, mask, argmax.as_deref(), g)));
                }
            }
            Op::Softmax(x, axis) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(g.shape(), *axis);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let s: T = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = y[at(j)] * (gd[at(j)] - s);
                            }
                        }
                    }
                    out.push((*x, Tensor::raw(g.shape().to_vec(), dx)));
                }
            }
            Op::LogSoftmax(x, axis) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(g.shape(), *axis);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let s: T = (0..len).map(|j| gd[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = gd[at(j)] - y[at(j)].exp() * s;
                            }
                        }
                    }
                    out.push((*x, Tensor::raw(g.shape().to_vec(), dx)));
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
                    let data = xd
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| {
                            let cdf = T::of(0.5)
                                * (T::one() + (v * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf());
                            let pdf = inv_sqrt_2pi * (-(v * v) * T::of(0.5)).exp();
                            gv * (cdf + v * pdf)
                        })
                        .collect();
                    out.push((*x, Tensor::raw(g.shape().to_vec(), data)));
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let data = y.iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                    out.push((*x, Tensor::raw(g.shape().to_vec(), data)));
                }
            }
            Op::HardSwish(x) => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let three = T::of(3.0);
                    let data = xd
                        .iter()
                        .zip(gd)
                        .map(|(&v, &gv)| {
                            let d = if v < -three {
                                T::zero()
                            } else if v > three {
                                T::one()
                            } else {
                                (v + v + three) / T::of(6.0)
                            };
                            gv * d
                        })
                        .collect();
                    out.push((*x, Tensor::raw(g.shape().to_vec(), data)));
                }
            }
            Op::Rsqrt(x) => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let data = y
                        .iter()
                        .zip(gd)
                        .map(|(&r, &gv)| gv * T::of(-0.5) * r * r * r)
                        .collect();
                    out.push((*x, Tensor::raw(g.shape().to_vec(), data)));
                }
            }
            Op::Gather(x, index) => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let d = dx.data_mut();
                    for (&src, &gv) in index.iter().zip(gd) {
                        d[src] += gv;
                    }
                    out.push((*x, dx));
                }
            }
        }
        out
    }

    fn reduce_grad(
        &self,
        x: Var,
        op: ReduceOp,
        mask: &[bool; MAX_RANK],
        argmax: Option<&[usize]>,
        g: &Tensor<T>,
    ) -> Tensor<T> {
        let shape = self.shape(x);
        let gd = g.data();
        let mut dx = Tensor::zeros(shape);
        if let (ReduceOp::Max, Some(arg)) = (op, argmax) {
            let d = dx.data_mut();
            for (o, &src) in arg.iter().enumerate() {
                d[src] += gd[o];
            }
            return dx;
        }
        let dims = pad4(shape);
        let mut odims = dims;
        let mut count = 1usize;
        for i in 0..MAX_RANK {
            if mask[i] {
                count *= dims[i];
                odims[i] = 1;
            }
        }
        let ostr = strides(&odims);
        let scale = match op {
            ReduceOp::Mean => T::one() / T::of(count as f64),
            _ => T::one(),
        };
        let d = dx.data_mut();
        let mut i = 0;
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    for e in 0..dims[3] {
                        let idx = [a, b, c, e];
                        let mut o = 0;
                        for ax in 0..MAX_RANK {
                            if !mask[ax] {
                                o += idx[ax] * ostr[ax];
                            }
                        }
                        d[i] = gd[o] * scale;
                        i += 1;
                    }
                }
            }
        }
        dx
    }
}
