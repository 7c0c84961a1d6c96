//! Slice-level numeric kernels shared by the tensor API and the tape.

use crate::scalar::Scalar;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_bt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_at<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

/// Zero padding on each side of a 2D map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pad2d {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Pad2d {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

/// Geometry of a 2D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Pad2d,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extent along one axis, `None` when the window does not tile exactly.
    pub fn out_len(len: usize, before: usize, after: usize, k: usize, stride: usize) -> Option<usize> {
        let padded = len + before + after;
        if stride == 0 || padded < k || (padded - k) % stride != 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let plane = g.ho * g.wo;
    let mut out = vec![S::zero(); g.c_out * plane];
    for co in 0..g.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let orow = &mut o[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                *ov = *ov + wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    grad: &[S],
    g: &ConvGeom,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let plane = g.ho * g.wo;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); g.c_out];
    for co in 0..g.c_out {
        let go = &grad[co * plane..(co + 1) * plane];
        db[co] = go.iter().copied().sum();
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = w[widx];
                    let mut acc = S::zero();
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad.top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = base + iy as usize * g.w;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad.left as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let gv = go[oy * g.wo + ox];
                            let xi = row + ix as usize;
                            acc = acc + gv * x[xi];
                            dx[xi] = dx[xi] + gv * wv;
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Temporal convolution over a `[t×c_in]` token sequence with kernel `[c_out×c_in×k]`,
/// zero padded by `k/2` on both ends.
pub(crate) fn conv1d_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Vec<S> {
    let p = k / 2;
    let mut out = vec![S::zero(); t * c_out];
    for ti in 0..t {
        for co in 0..c_out {
            let mut acc = bias.map_or(S::zero(), |b| b[co]);
            for j in 0..k {
                let src = ti as isize + j as isize - p as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &x[src as usize * c_in..(src as usize + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    acc = acc + w[(co * c_in + ci) * k + j] * xv;
                }
            }
            out[ti * c_out + co] = acc;
        }
    }
    out
}

pub(crate) fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    grad: &[S],
    t: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let p = k / 2;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); c_out];
    for ti in 0..t {
        for co in 0..c_out {
            let gv = grad[ti * c_out + co];
            db[co] = db[co] + gv;
            for j in 0..k {
                let src = ti as isize + j as isize - p as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let s = src as usize;
                for ci in 0..c_in {
                    let widx = (co * c_in + ci) * k + j;
                    dw[widx] = dw[widx] + gv * x[s * c_in + ci];
                    dx[s * c_in + ci] = dx[s * c_in + ci] + gv * w[widx];
                }
            }
        }
    }
    (dx, dw, db)
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Above this input softplus is the identity to working precision.
pub const SOFTPLUS_THRESHOLD: f64 = 30.0;

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    if x > S::c(SOFTPLUS_THRESHOLD) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}
