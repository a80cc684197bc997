//! Raw loops behind the differentiable ops. Everything is NHWC / row-major and
//! inner loops run over the contiguous trailing axis.

use crate::real::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(arow, brow);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Output extent and leading pad for TF-style SAME padding.
pub fn same_padding(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(n: usize, h: usize, w: usize, cin: usize, kh: usize, kw: usize, stride: usize) -> Self {
        let (oh, pad_t) = same_padding(h, kh, stride);
        let (ow, pad_l) = same_padding(w, kw, stride);
        ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            oh,
            ow,
            pad_t,
            pad_l,
        }
    }

    /// Input row for output row `o` and tap `t`, if inside the image.
    #[inline]
    pub fn in_row(&self, o: usize, t: usize) -> Option<usize> {
        let r = (o * self.stride + t).checked_sub(self.pad_t)?;
        (r < self.h).then_some(r)
    }

    #[inline]
    pub fn in_col(&self, o: usize, t: usize) -> Option<usize> {
        let c = (o * self.stride + t).checked_sub(self.pad_l)?;
        (c < self.w).then_some(c)
    }
}

pub(crate) fn conv2d_fwd<T: Real>(g: &ConvGeom, x: &[T], w: &[T], cout: usize, y: &mut [T]) {
    let cin = g.cin;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * cout;
                let out = &mut y[obase..obase + cout];
                for ty in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ty) else { continue };
                    for tx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, tx) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                        let wbase = (ty * g.kw + tx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[xbase + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (o, &wv) in out.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_bwd<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    cout: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let cin = g.cin;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * cout;
                let gout = &dy[obase..obase + cout];
                for ty in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ty) else { continue };
                    for tx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, tx) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * cin;
                        let wbase = (ty * g.kw + tx) * cin * cout;
                        for ci in 0..cin {
                            let wrow = wbase + ci * cout..wbase + (ci + 1) * cout;
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xbase + ci] += dot(gout, &w[wrow.clone()]);
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let xv = x[xbase + ci];
                                for (d, &gv) in dw[wrow].iter_mut().zip(gout) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dwconv_fwd<T: Real>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    let c = g.cin;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * c;
                let out = &mut y[obase..obase + c];
                for ty in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ty) else { continue };
                    for tx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, tx) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * c;
                        let wbase = (ty * g.kw + tx) * c;
                        let xs = &x[xbase..xbase + c];
                        let ws = &w[wbase..wbase + c];
                        for ((o, &xv), &wv) in out.iter_mut().zip(xs).zip(ws) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dwconv_bwd<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let c = g.cin;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * c;
                let gout = &dy[obase..obase + c];
                for ty in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ty) else { continue };
                    for tx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, tx) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * c;
                        let wbase = (ty * g.kw + tx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for ((d, &gv), &wv) in
                                dx[xbase..xbase + c].iter_mut().zip(gout).zip(&w[wbase..wbase + c])
                            {
                                *d += gv * wv;
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for ((d, &gv), &xv) in
                                dw[wbase..wbase + c].iter_mut().zip(gout).zip(&x[xbase..xbase + c])
                            {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// SAME average pooling; each output averages only the in-bounds taps.
pub(crate) fn avgpool_fwd<T: Real>(g: &ConvGeom, x: &[T], y: &mut [T]) {
    let c = g.cin;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * c;
                let mut count = 0usize;
                for ty in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ty) else { continue };
                    for tx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, tx) else { continue };
                        count += 1;
                        let xbase = ((n * g.h + iy) * g.w + ix) * c;
                        for (o, &xv) in y[obase..obase + c].iter_mut().zip(&x[xbase..xbase + c]) {
                            *o += xv;
                        }
                    }
                }
                let inv = T::one() / T::of(count as f64);
                for o in &mut y[obase..obase + c] {
                    *o *= inv;
                }
            }
        }
    }
}

pub(crate) fn avgpool_bwd<T: Real>(g: &ConvGeom, dy: &[T], dx: &mut [T]) {
    let c = g.cin;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let obase = ((n * g.oh + oy) * g.ow + ox) * c;
                let taps: usize = (0..g.kh).filter(|&t| g.in_row(oy, t).is_some()).count()
                    * (0..g.kw).filter(|&t| g.in_col(ox, t).is_some()).count();
                let inv = T::one() / T::of(taps as f64);
                for ty in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ty) else { continue };
                    for tx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, tx) else { continue };
                        let xbase = ((n * g.h + iy) * g.w + ix) * c;
                        for (d, &gv) in dx[xbase..xbase + c].iter_mut().zip(&dy[obase..obase + c]) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_convention() {
        // even input, 3x3 stride 2: one extra pad row goes bottom/right
        assert_eq!(same_padding(8, 3, 2), (4, 0));
        assert_eq!(same_padding(7, 3, 2), (4, 1));
        assert_eq!(same_padding(5, 3, 1), (5, 1));
        assert_eq!(same_padding(8, 2, 2), (4, 0));
        assert_eq!(same_padding(7, 2, 2), (4, 0));
    }
}
