//! Plain-loop reference implementations shared by the integration tests.
//! Nothing here calls into the tape; layers are recomputed from raw
//! parameter values fetched by name.
#![allow(dead_code)]

use moat_core::nn::{ParamBuilder, ParamStore, Role};
use moat_core::rng::{stream, uniform_tensor, Stream};
use moat_core::Tensor;
use rand::Rng;

/// NHWC image held as a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Img {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Img {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Img { n, h, w, c, d: vec![0.0; n * h * w * c] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        Img { n: s[0], h: s[1], w: s[2], c: s[3], d: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.n, self.h, self.w, self.c], self.d.clone()).unwrap()
    }

    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.d[((n * self.h + y) * self.w + x) * self.c + c]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = ((n * self.h + y) * self.w + x) * self.c + c;
        self.d[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Img {
        Img { d: self.d.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn add(&self, o: &Img) -> Img {
        assert_eq!((self.n, self.h, self.w, self.c), (o.n, o.h, o.w, o.c));
        Img { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..*self }
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Leading pad and output extent for SAME padding, from first principles.
fn pad(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let need = ((out - 1) * stride + k).saturating_sub(input);
    (out, need / 2)
}

pub fn conv(x: &Img, w: &[f64], k: usize, cout: usize, bias: Option<&[f64]>, stride: usize) -> Img {
    let (oh, pt) = pad(x.h, k, stride);
    let (ow, pl) = pad(x.w, k, stride);
    let mut y = Img::zeros(x.n, oh, ow, cout);
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = bias.map_or(0.0, |b| b[co]);
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for ci in 0..x.c {
                                let wi = ((ky * k + kx) * x.c + ci) * cout + co;
                                s += x.at(n, iy as usize, ix as usize, ci) * w[wi];
                            }
                        }
                    }
                    y.set(n, oy, ox, co, s);
                }
            }
        }
    }
    y
}

pub fn dwconv(x: &Img, w: &[f64], k: usize, stride: usize) -> Img {
    let (oh, pt) = pad(x.h, k, stride);
    let (ow, pl) = pad(x.w, k, stride);
    let mut y = Img::zeros(x.n, oh, ow, x.c);
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..x.c {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            s += x.at(n, iy as usize, ix as usize, c) * w[(ky * k + kx) * x.c + c];
                        }
                    }
                    y.set(n, oy, ox, c, s);
                }
            }
        }
    }
    y
}

pub fn avgpool2(x: &Img) -> Img {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut y = Img::zeros(x.n, oh, ow, x.c);
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..x.c {
                    let (mut s, mut cnt) = (0.0, 0.0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                            if iy < x.h && ix < x.w {
                                s += x.at(n, iy, ix, c);
                                cnt += 1.0;
                            }
                        }
                    }
                    y.set(n, oy, ox, c, s / cnt);
                }
            }
        }
    }
    y
}

/// `rows × cin` times `cin × cout` plus optional bias, on the channel axis.
pub fn dense(x: &Img, w: &[f64], cout: usize, bias: Option<&[f64]>) -> Img {
    let cin = x.c;
    let rows = x.n * x.h * x.w;
    let mut d = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut s = bias.map_or(0.0, |b| b[o]);
            for i in 0..cin {
                s += x.d[r * cin + i] * w[i * cout + o];
            }
            d[r * cout + o] = s;
        }
    }
    Img { c: cout, d, ..*x }
}

pub fn bn_eval(x: &Img, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Img {
    let mut y = x.clone();
    for (i, v) in y.d.iter_mut().enumerate() {
        let c = i % x.c;
        *v = (*v - mean[c]) / (var[c] + eps).sqrt() * gamma[c] + beta[c];
    }
    y
}

/// Biased batch statistics over N, H, W.
pub fn batch_stats(x: &Img) -> (Vec<f64>, Vec<f64>) {
    let m = (x.n * x.h * x.w) as f64;
    let mut mean = vec![0.0; x.c];
    for (i, v) in x.d.iter().enumerate() {
        mean[i % x.c] += v / m;
    }
    let mut var = vec![0.0; x.c];
    for (i, v) in x.d.iter().enumerate() {
        var[i % x.c] += (v - mean[i % x.c]).powi(2) / m;
    }
    (mean, var)
}

pub fn layer_norm(x: &Img, gamma: &[f64], beta: &[f64], eps: f64) -> Img {
    let mut y = x.clone();
    for row in y.d.chunks_mut(x.c) {
        let mu = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.c as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mu) / (var + eps).sqrt() * gamma[j] + beta[j];
        }
    }
    y
}

/// Exact-erf GeLU through an independent erf (accurate to about 1e-11).
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + statrs::function::erf::erf(v / std::f64::consts::SQRT_2))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn hard_swish(v: f64) -> f64 {
    v * (v + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn se(x: &Img, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Img {
    let hidden = b1.len();
    let mut y = x.clone();
    for n in 0..x.n {
        let mut pooled = vec![0.0; x.c];
        for yy in 0..x.h {
            for xx in 0..x.w {
                for c in 0..x.c {
                    pooled[c] += x.at(n, yy, xx, c) / (x.h * x.w) as f64;
                }
            }
        }
        let h: Vec<f64> = (0..hidden)
            .map(|j| hard_swish(b1[j] + (0..x.c).map(|c| pooled[c] * w1[c * hidden + j]).sum::<f64>()))
            .collect();
        let g: Vec<f64> = (0..x.c)
            .map(|c| sigmoid(b2[c] + (0..hidden).map(|j| h[j] * w2[j * x.c + c]).sum::<f64>()))
            .collect();
        for yy in 0..x.h {
            for xx in 0..x.w {
                for c in 0..x.c {
                    y.set(n, yy, xx, c, x.at(n, yy, xx, c) * g[c]);
                }
            }
        }
    }
    y
}

pub struct AttnWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub heads: usize,
    /// `[heads, (2k−1)²]` for a `k×k` attention grid.
    pub table: Option<&'a [f64]>,
}

/// Brute-force multi-head attention over each `win×win` window (or the
/// whole map when `win` is `None`), materializing every logit.
pub fn attention(x: &Img, a: &AttnWeights<'_>, win: Option<usize>) -> Img {
    let cout = a.wo.len() / (a.wq.len() / x.c);
    let c = a.wq.len() / x.c;
    let d = c / a.heads;
    let (gh, gw) = match win {
        Some(k) => (k, k),
        None => (x.h, x.w),
    };
    let q = dense(x, a.wq, c, None);
    let k = dense(x, a.wk, c, None);
    let v = dense(x, a.wv, c, None);
    let mut ctx = Img::zeros(x.n, x.h, x.w, c);
    for n in 0..x.n {
        for wy in 0..x.h / gh {
            for wx in 0..x.w / gw {
                let pos: Vec<(usize, usize)> = (0..gh * gw).map(|p| (wy * gh + p / gw, wx * gw + p % gw)).collect();
                for h in 0..a.heads {
                    for (pi, &(r1, c1)) in pos.iter().enumerate() {
                        let mut logits = Vec::with_capacity(pos.len());
                        for (qi, &(r2, c2)) in pos.iter().enumerate() {
                            let mut s = 0.0;
                            for j in 0..d {
                                s += q.at(n, r1, c1, h * d + j) * k.at(n, r2, c2, h * d + j);
                            }
                            s /= (d as f64).sqrt();
                            if let Some(t) = a.table {
                                let (lr1, lc1) = (pi / gw, pi % gw);
                                let (lr2, lc2) = (qi / gw, qi % gw);
                                let dr = lr1 as isize - lr2 as isize + gh as isize - 1;
                                let dc = lc1 as isize - lc2 as isize + gw as isize - 1;
                                let tl = (2 * gh - 1) * (2 * gw - 1);
                                s += t[h * tl + dr as usize * (2 * gw - 1) + dc as usize];
                            }
                            logits.push(s);
                        }
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for j in 0..d {
                            let mut s = 0.0;
                            for (qi, &(r2, c2)) in pos.iter().enumerate() {
                                s += e[qi] / z * v.at(n, r2, c2, h * d + j);
                            }
                            ctx.set(n, r1, c1, h * d + j, s);
                        }
                    }
                }
            }
        }
    }
    dense(&ctx, a.wo, cout, None)
}

/// Raw values of a named parameter.
pub fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).value.data()
}

pub fn opt_p<'a>(store: &'a ParamStore<f64>, name: &str) -> Option<&'a [f64]> {
    store.get(name).map(|e| e.value.data())
}

/// Overwrites every tensor with random values suited to its role, so that
/// oracles see non-trivial norms, running statistics and bias tables.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = stream(seed, Stream::Gradcheck);
    for e in store.entries_mut() {
        let shape = e.spec.shape.clone();
        let t = match e.spec.role {
            Role::Weight => uniform_tensor(&mut rng, &shape, -0.4, 0.4),
            Role::Gain | Role::RunningVar => uniform_tensor(&mut rng, &shape, 0.5, 1.5),
            _ => uniform_tensor(&mut rng, &shape, -0.3, 0.3),
        };
        *e.value_mut() = t;
    }
}

pub fn store_for(pb: &ParamBuilder, seed: u64) -> ParamStore<f64> {
    let mut rng = stream(seed, Stream::Init);
    let mut s = ParamStore::materialize(pb.specs(), &mut rng);
    randomize(&mut s, seed);
    s
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Data);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Zeroes a named tensor.
pub fn zero(store: &mut ParamStore<f64>, name: &str) {
    let shape = store.get(name).unwrap().spec.shape.clone();
    store.set_value(name, Tensor::zeros(&shape)).unwrap();
}
