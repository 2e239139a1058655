//! Raw slice kernels shared by the forward ops and their backward rules.
//!
//! Every kernel produces each output element with a fixed sequential
//! reduction order; parallelism is only over independent output rows.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `c[m,n] = a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m,k] = a[m,n] · b[k,n]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    if m == 0 || k == 0 {
        return c;
    }
    let row = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *cv = dot(arow, brow);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
    c
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    if k == 0 || n == 0 {
        return c;
    }
    let row = |(p, crow): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Softmax over consecutive rows of length `d`, with max subtraction.
pub fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

/// Iterates the flat index of `b` (broadcast into `out_shape`) for every
/// flat position of `out_shape`, in row-major order.
pub fn broadcast_indices(out_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let pad = nd - b_shape.len();
    let mut bstr = vec![0usize; nd];
    let mut acc = 1;
    for i in (0..b_shape.len()).rev() {
        if b_shape[i] != 1 {
            bstr[pad + i] = acc;
        }
        acc *= b_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            cur += bstr[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= bstr[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    idx
}

/// `true` when `b` can be broadcast to `a` (numpy rules, `a` fixed).
pub fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let pad = a.len() - b.len();
    b.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == a[pad + i])
}

pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let in_str = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; nd];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(x[cur]);
        for ax in (0..nd).rev() {
            counter[ax] += 1;
            cur += src_str[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            cur -= src_str[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a stride-1 2D convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
}

/// Unfolds one image `[c_in, h, w]` into `[c_in·k·k, oh·ow]`.
pub fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.c_in * g.k * g.k * oh * ow];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let (lo, hi) = valid_span(kx, g.pad, g.w, ow);
                    if lo < hi {
                        let src = (c * g.h + iy) * g.w + lo + kx - g.pad;
                        dst[oy * ow + lo..oy * ow + hi].copy_from_slice(&x[src..src + hi - lo]);
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` lies inside `0..w`.
fn valid_span(kx: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: folds columns back into an image, summing overlaps.
pub fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let (lo, hi) = valid_span(kx, g.pad, g.w, ow);
                    if lo < hi {
                        let dst = (c * g.h + iy) * g.w + lo + kx - g.pad;
                        for (xv, &sv) in x[dst..dst + hi - lo].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *xv += sv;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Scatters transposed-convolution columns `[c_out·k·k, h·w]` into the
/// strided output `[c_out, (h-1)s+k, (w-1)s+k]`.
pub fn scatter_transposed(cols: &[f64], c_out: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - 1) * s + k, (w - 1) * s + k);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for ky in 0..k {
            for kx in 0..k {
                let r = (o * k + ky) * k + kx;
                let src = &cols[r * h * w..(r + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        out[(o * oh + y * s + ky) * ow + x * s + kx] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`scatter_transposed`].
pub fn gather_transposed(dout: &[f64], c_out: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - 1) * s + k, (w - 1) * s + k);
    let mut cols = vec![0.0; c_out * k * k * h * w];
    for o in 0..c_out {
        for ky in 0..k {
            for kx in 0..k {
                let r = (o * k + ky) * k + kx;
                let dst = &mut cols[r * h * w..(r + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = dout[(o * oh + y * s + ky) * ow + x * s + kx];
                    }
                }
            }
        }
    }
    cols
}
