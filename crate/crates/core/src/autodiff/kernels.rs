//! Slice-level forward/backward kernels used by the tape.

use crate::scalar::{gemm, Layout, Scalar};

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        [n, c_in, h, w]: [usize; 4],
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one sample `[C,H,W]` into `[C·k·k, Ho·Wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ckk, p) = (g.ckk(), g.p());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); ckk * p];
    for n in 0..g.n {
        let o = &mut out[n * out_len..(n + 1) * out_len];
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            let xs = &x[n * in_len..(n + 1) * in_len];
            gemm(g.c_out, ckk, p, T::one(), w, Layout::rows(ckk), xs, Layout::rows(p), T::zero(), o, Layout::rows(p));
        } else {
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
            gemm(g.c_out, ckk, p, T::one(), w, Layout::rows(ckk), &cols, Layout::rows(p), T::zero(), o, Layout::rows(p));
        }
        if let Some(b) = b {
            for (co, row) in o.chunks_exact_mut(p).enumerate() {
                let bias = b[co];
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (ckk, p) = (g.ckk(), g.p());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.c_out]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * p }];
    let mut dcols = vec![T::zero(); if pointwise { 0 } else { ckk * p }];
    for n in 0..g.n {
        let go = &dout[n * out_len..(n + 1) * out_len];
        let xs = &x[n * in_len..(n + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(g.c_out, p, ckk, T::one(), go, Layout::rows(p), src, Layout::transposed(p), T::one(), dw, Layout::rows(ckk));
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_len..(n + 1) * in_len];
            if pointwise {
                gemm(ckk, g.c_out, p, T::one(), w, Layout::transposed(ckk), go, Layout::rows(p), T::one(), dxs, Layout::rows(p));
            } else {
                gemm(ckk, g.c_out, p, T::one(), w, Layout::transposed(ckk), go, Layout::rows(p), T::zero(), &mut dcols, Layout::rows(p));
                col2im(&dcols, g, dxs);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in go.chunks_exact(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Normalisation over contiguous blocks of `block` elements; `param_of(i)`
/// maps an element's offset inside its block to its affine parameter index.
pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    block: usize,
    param_of: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, NormSaved<T>) {
    let eps = T::of(NORM_EPS);
    let inv_m = T::of(1.0 / block as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(x.len() / block);
    for (bi, xs) in x.chunks_exact(block).enumerate() {
        let mean = xs.iter().copied().sum::<T>() * inv_m;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        let off = bi * block;
        for (i, &v) in xs.iter().enumerate() {
            let xh = (v - mean) * rstd;
            let pi = param_of(bi, i);
            xhat[off + i] = xh;
            y[off + i] = xh * gamma[pi] + beta[pi];
        }
    }
    (y, NormSaved { xhat, rstd: rstds })
}

pub(crate) fn norm_backward<T: Scalar>(
    dy: &[T],
    gamma: &[T],
    saved: &NormSaved<T>,
    block: usize,
    param_of: impl Fn(usize, usize) -> usize,
    n_params: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_m = T::of(1.0 / block as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); n_params];
    let mut dbeta = vec![T::zero(); n_params];
    let mut dxhat = vec![T::zero(); block];
    for (bi, gs) in dy.chunks_exact(block).enumerate() {
        let off = bi * block;
        let xh = &saved.xhat[off..off + block];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..block {
            let pi = param_of(bi, i);
            dgamma[pi] += gs[i] * xh[i];
            dbeta[pi] += gs[i];
            let d = gs[i] * gamma[pi];
            dxhat[i] = d;
            s1 += d;
            s2 += d * xh[i];
        }
        let rstd = saved.rstd[bi];
        for i in 0..block {
            dx[off + i] = rstd * (dxhat[i] - s1 * inv_m - xh[i] * s2 * inv_m);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xs, ys) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in ys.iter_mut().zip(xs) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        ys.iter_mut().for_each(|o| *o *= inv);
    }
    y
}

/// Batched `[B,M,K] x [B,K,N]`, or `[B,M,K] x [B,N,K]^T` when `trans_b`.
pub(crate) fn bmm<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let lb = if trans_b {
            Layout::transposed(k).at(i * n * k)
        } else {
            Layout::rows(n).at(i * k * n)
        };
        gemm(m, k, n, T::one(), a, Layout::rows(k).at(i * m * k), b, lb, T::zero(), &mut out, Layout::rows(n).at(i * m * n));
    }
    out
}
