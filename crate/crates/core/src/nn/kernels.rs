//! Forward and backward kernels on raw slices. Shapes are validated by callers.

use alloc::vec;
use alloc::vec::Vec;

/// `out[n×m] = a[n×k] · b[k×m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[n×m] = a[n×k] · b[m×k]ᵀ`
pub fn matmul_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×m] = a[n×k]ᵀ · b[n×m]`
pub fn matmul_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Output extents, or `None` when the window arithmetic is not integral.
    pub fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(k)?;
        let span_w = (w + 2 * pad).checked_sub(k)?;
        if stride == 0 || span_h % stride != 0 || span_w % stride != 0 {
            return None;
        }
        Some(Self { c_in, h, w, c_out, k, stride, pad, h_out: span_h / stride + 1, w_out: span_w / stride + 1 })
    }

    /// Output column range `[lo, hi)` for which `ow*stride + kw - pad` is in bounds.
    fn valid_range(&self, offset: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // input index = o*stride + offset - pad
        let lo = if offset >= self.pad { 0 } else { (self.pad - offset).div_ceil(self.stride) };
        let hi_num = extent + self.pad;
        let hi = if hi_num <= offset { 0 } else { (hi_num - offset - 1) / self.stride + 1 };
        (lo.min(out_extent), hi.min(out_extent))
    }
}

/// Cross-correlation of `x[c_in×h×w]` with `kernel[c_out×c_in×k×k]`.
pub fn conv2d(x: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let oplane = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            oplane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.valid_range(kh, g.h, g.h_out);
                for kw in 0..g.k {
                    let wv = kernel[((co * g.c_in + ci) * g.k + kh) * g.k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ow_lo, ow_hi) = g.valid_range(kw, g.w, g.w_out);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let xrow = &xplane[ih * g.w..(ih + 1) * g.w];
                        let orow = &mut oplane[oh * g.w_out..(oh + 1) * g.w_out];
                        for ow in ow_lo..ow_hi {
                            orow[ow] += wv * xrow[ow * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(x: &[f64], kernel: &[f64], gout: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = g.h_out * g.w_out;
    let mut gx = vec![0.0; g.c_in * g.h * g.w];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let gplane = &gout[co * plane..(co + 1) * plane];
        gb[co] = gplane.iter().sum();
        for ci in 0..g.c_in {
            let xoff = ci * g.h * g.w;
            for kh in 0..g.k {
                let (oh_lo, oh_hi) = g.valid_range(kh, g.h, g.h_out);
                for kw in 0..g.k {
                    let kidx = ((co * g.c_in + ci) * g.k + kh) * g.k + kw;
                    let wv = kernel[kidx];
                    let (ow_lo, ow_hi) = g.valid_range(kw, g.w, g.w_out);
                    let mut acc = 0.0;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.pad;
                        let grow = &gplane[oh * g.w_out..(oh + 1) * g.w_out];
                        let base = xoff + ih * g.w;
                        for ow in ow_lo..ow_hi {
                            let ix = base + ow * g.stride + kw - g.pad;
                            acc += grow[ow] * x[ix];
                            gx[ix] += grow[ow] * wv;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Group normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub normalized: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group norm over `x[c×plane]` with per-channel affine `gamma`, `beta`.
pub fn group_norm(x: &[f64], c: usize, plane: usize, groups: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, GroupNormCache) {
    let cpg = c / groups;
    let n = (cpg * plane) as f64;
    let mut normalized = vec![0.0; x.len()];
    let mut rstd = vec![0.0; groups];
    for gi in 0..groups {
        let span = gi * cpg * plane..(gi + 1) * cpg * plane;
        let xs = &x[span.clone()];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / libm::sqrt(var + GROUP_NORM_EPS);
        rstd[gi] = r;
        for (o, v) in normalized[span].iter_mut().zip(xs) {
            *o = (v - mean) * r;
        }
    }
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in ch * plane..(ch + 1) * plane {
            out[i] = normalized[i] * gamma[ch] + beta[ch];
        }
    }
    (out, GroupNormCache { normalized, rstd })
}

/// Returns gradients with respect to input, gamma and beta.
pub fn group_norm_backward(
    gout: &[f64],
    cache: &GroupNormCache,
    c: usize,
    plane: usize,
    groups: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cpg = c / groups;
    let n = (cpg * plane) as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gxhat = vec![0.0; gout.len()];
    for ch in 0..c {
        for i in ch * plane..(ch + 1) * plane {
            ggamma[ch] += gout[i] * cache.normalized[i];
            gbeta[ch] += gout[i];
            gxhat[i] = gout[i] * gamma[ch];
        }
    }
    let mut gx = vec![0.0; gout.len()];
    for gi in 0..groups {
        let span = gi * cpg * plane..(gi + 1) * cpg * plane;
        let sum_g: f64 = gxhat[span.clone()].iter().sum();
        let sum_gx: f64 = gxhat[span.clone()].iter().zip(&cache.normalized[span.clone()]).map(|(a, b)| a * b).sum();
        let r = cache.rstd[gi];
        for i in span {
            gx[i] = r / n * (n * gxhat[i] - sum_g - cache.normalized[i] * sum_gx);
        }
    }
    (gx, ggamma, gbeta)
}

/// Numerically stable softmax over each row of `m[n×s]`.
pub fn softmax_rows(m: &[f64], n: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * s];
    for i in 0..n {
        let row = &m[i * s..(i + 1) * s];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * s..(i + 1) * s];
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = libm::exp(v - max);
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}

pub fn softmax_rows_backward(y: &[f64], gout: &[f64], n: usize, s: usize) -> Vec<f64> {
    let mut gx = vec![0.0; n * s];
    for i in 0..n {
        let yr = &y[i * s..(i + 1) * s];
        let gr = &gout[i * s..(i + 1) * s];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..s {
            gx[i * s + j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
