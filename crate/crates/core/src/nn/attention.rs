//! Multi-head self-attention with a relative position bias table, plus
//! non-overlapping window partition/merge.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use super::ctx::Ctx;
use super::layers::{Dense, Hw};
use super::params::{ParamBuilder, ParamId, Role};
use crate::analysis::CostSink;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::real::Real;

pub const HEAD_DIM: usize = 32;

/// `c / 32` heads when `c` is a multiple of 32; otherwise the largest divisor
/// of `c` not above `c / 32` (at least one head).
pub fn heads_for(c: usize) -> usize {
    let target = (c / HEAD_DIM).max(1);
    (1..=target).rev().find(|h| c.is_multiple_of(*h)).unwrap_or(1)
}

/// Index map for `[N,H,W,C] -> [N·(H/k)·(W/k), k, k, C]`.
pub fn partition_index(n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<usize> {
    let (nh, nw) = (h / k, w / k);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wi in 0..nh {
            for wj in 0..nw {
                for i in 0..k {
                    for j in 0..k {
                        let base = ((b * h + wi * k + i) * w + wj * k + j) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

fn check_window(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
        return Err(Error::config(format!(
            "feature map {h}x{w} is not divisible by window {k}; pad the input upstream to a multiple of {k}"
        )));
    }
    Ok(())
}

pub fn window_partition<T: Real>(cx: &mut Ctx<'_, T>, x: Var, k: usize) -> Result<Var> {
    let s = cx.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("window_partition", &s, &[k, k]));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    check_window(h, w, k)?;
    let idx: Arc<[usize]> = partition_index(n, h, w, c, k).into();
    cx.tape.gather(x, idx, &[n * (h / k) * (w / k), k, k, c])
}

/// Inverse of [`window_partition`] for a target `[n, h, w]` layout.
pub fn window_merge<T: Real>(cx: &mut Ctx<'_, T>, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
    let s = cx.shape(x).to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::dim("window_merge", &s, &[n, h, w]));
    }
    let (k, c) = (s[1], s[3]);
    check_window(h, w, k)?;
    if s[0] != n * (h / k) * (w / k) {
        return Err(Error::dim("window_merge", &s, &[n, h, w]));
    }
    let fwd = partition_index(n, h, w, c, k);
    let mut inv = alloc::vec![0usize; fwd.len()];
    for (o, &i) in fwd.iter().enumerate() {
        inv[i] = o;
    }
    cx.tape.gather(x, inv.into(), &[n, h, w, c])
}

/// Flat table offset for the relative offset between positions `p` and `q`
/// of an `h×w` grid.
pub fn rel_offset(h: usize, w: usize, p: usize, q: usize) -> usize {
    let (r1, c1) = (p / w, p % w);
    let (r2, c2) = (q / w, q % w);
    (r1 + h - 1 - r2) * (2 * w - 1) + (c1 + w - 1 - c2)
}

pub fn rel_table_len(grid: Hw) -> usize {
    (2 * grid.h - 1) * (2 * grid.w - 1)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub path: String,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub heads: usize,
    pub head_dim: usize,
    /// `[heads, (2H−1)(2W−1)]`, bound to `grid`.
    pub rel_bias: Option<ParamId>,
    /// Spatial extent each attention call sees (the window when windowed).
    pub grid: Hw,
    pub window: Option<usize>,
}

impl MultiHeadAttention {
    /// `input` is the feature extent the layer is applied to.
    pub fn declare(
        pb: &mut ParamBuilder,
        path: &str,
        cin: usize,
        cout: usize,
        input: Hw,
        window: Option<usize>,
        rel_bias: bool,
    ) -> Result<Self> {
        let heads = heads_for(cout);
        let grid = match window {
            Some(k) => {
                check_window(input.h, input.w, k)?;
                Hw::square(k)
            }
            None => input,
        };
        let rel = if rel_bias {
            let name = format!("{path}.rel_bias");
            Some(pb.declare(name, &[heads, rel_table_len(grid)], Role::RelBias)?)
        } else {
            None
        };
        Ok(MultiHeadAttention {
            path: path.into(),
            wq: Dense::declare(pb, &format!("{path}.query"), cin, cout, false)?,
            wk: Dense::declare(pb, &format!("{path}.key"), cin, cout, false)?,
            wv: Dense::declare(pb, &format!("{path}.value"), cin, cout, false)?,
            wo: Dense::declare(pb, &format!("{path}.output"), cout, cout, false)?,
            heads,
            head_dim: cout / heads,
            rel_bias: rel,
            grid,
            window,
        })
    }

    pub fn cin(&self) -> usize {
        self.wq.cin
    }

    pub fn cout(&self) -> usize {
        self.wo.cout
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_probs(cx, x)?.0)
    }

    /// Output and the attention weights `[B, heads, L, L]`.
    pub fn forward_probs<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let s = cx.shape(x).to_vec();
        if s.len() != 4 || s[3] != self.cin() {
            return Err(Error::dim("attention", &s, &[self.cin()]));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let seq = match self.window {
            Some(k) => window_partition(cx, x, k)?,
            None => x,
        };
        let ss = cx.shape(seq).to_vec();
        let (b, gh, gw) = (ss[0], ss[1], ss[2]);
        if self.rel_bias.is_some() && (gh != self.grid.h || gw != self.grid.w) {
            return Err(Error::config(format!(
                "relative bias table built for {}x{} but attention sees {gh}x{gw}",
                self.grid.h, self.grid.w
            )));
        }
        let l = gh * gw;
        cx.record(&self.path, "attention", &[b, l]);
        let (nh, d) = (self.heads, self.head_dim);
        let split = |cx: &mut Ctx<'_, T>, t: Var, perm: &[usize]| -> Result<Var> {
            let t = cx.tape.reshape(t, &[b, l, nh, d])?;
            cx.tape.permute(t, perm)
        };
        let q = self.wq.forward(cx, seq)?;
        let q = split(cx, q, &[0, 2, 1, 3])?;
        let k = self.wk.forward(cx, seq)?;
        let k = split(cx, k, &[0, 2, 3, 1])?;
        let v = self.wv.forward(cx, seq)?;
        let v = split(cx, v, &[0, 2, 1, 3])?;
        let logits = cx.tape.matmul(q, k)?;
        let mut logits = cx.tape.scale(logits, 1.0 / libm::sqrt(d as f64));
        if let Some(id) = self.rel_bias {
            let table = cx.param(id);
            let tl = rel_table_len(self.grid);
            let mut idx = Vec::with_capacity(nh * l * l);
            for head in 0..nh {
                for p in 0..l {
                    for q in 0..l {
                        idx.push(head * tl + rel_offset(gh, gw, p, q));
                    }
                }
            }
            let bias = cx.tape.gather(table, idx.into(), &[1, nh, l, l])?;
            logits = cx.tape.add(logits, bias)?;
        }
        let probs = cx.tape.softmax(logits, 3)?;
        let ctxv = cx.tape.matmul(probs, v)?;
        let ctxv = cx.tape.permute(ctxv, &[0, 2, 1, 3])?;
        let ctxv = cx.tape.reshape(ctxv, &[b, gh, gw, nh * d])?;
        let out = self.wo.forward(cx, ctxv)?;
        let out = match self.window {
            Some(_) => window_merge(cx, out, n, h, w)?,
            None => out,
        };
        Ok((out, probs))
    }

    pub fn cost(&self, sink: &mut CostSink, input: Hw) {
        let tokens = input.area();
        self.wq.cost(sink, tokens);
        self.wk.cost(sink, tokens);
        self.wv.cost(sink, tokens);
        let l = match self.window {
            Some(k) => k * k,
            None => tokens,
        };
        let windows = tokens / l;
        let logits = windows * self.heads * l * l;
        let c = self.heads * self.head_dim;
        let table = self.rel_bias.map_or(0, |_| self.heads * rel_table_len(self.grid));
        let bias_add = if self.rel_bias.is_some() { logits } else { 0 };
        // q·kᵀ and probs·v, plus scale, bias add and two passes of softmax.
        let flops = 2 * windows * l * l * c + logits + bias_add + 2 * logits;
        sink.row(&format!("{}.logits", self.path), "attention", table, flops);
        self.wo.cost(sink, tokens);
    }
}
