//! Forward and backward kernels over flat row-major buffers.
//!
//! Broadcasting follows the usual trailing-axis rule: shapes are aligned on
//! their last axis, missing leading axes count as extent 1, and an extent-1
//! axis stretches to match the other operand. Anything else is a dimension
//! error.

use crate::error::{dim_err, Result};

use super::Tensor;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Index mapping from an output position to the two broadcast operands.
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

fn aligned_strides(shape: &[usize], rank: usize, out: &[usize]) -> Vec<usize> {
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d + offset] = if shape[d] == 1 && out[d + offset] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[d];
    }
    strides
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for d in 0..rank {
            let ea = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
            let eb = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
            out[d] = if ea == eb {
                ea
            } else if ea == 1 {
                eb
            } else if eb == 1 {
                ea
            } else {
                return Err(dim_err!("cannot broadcast shapes {:?} and {:?}", a, b));
            };
        }
        let a_strides = aligned_strides(a, rank, &out);
        let b_strides = aligned_strides(b, rank, &out);
        Ok(Broadcast {
            same: a == b,
            out,
            a_strides,
            b_strides,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = numel(&self.out);
        if self.same {
            for i in 0..total {
                f(i, i, i);
            }
            return;
        }
        if total == 0 {
            return;
        }
        let rank = self.out.len();
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            let mut d = rank;
            while d > 0 {
                d -= 1;
                counter[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if counter[d] < self.out[d] {
                    break;
                }
                ia -= self.a_strides[d] * counter[d];
                ib -= self.b_strides[d] * counter[d];
                counter[d] = 0;
            }
        }
    }
}

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`; the
/// `*_t` flags mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(dim_err!(
                "conv2d expects N x C x H x W input and F x C x kh x kw kernel, got {:?} and {:?}",
                x,
                k
            ));
        }
        if stride == 0 {
            return Err(crate::Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (f, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != c {
            return Err(dim_err!(
                "conv2d kernel {:?} expects {} channels, input {:?} has {}",
                k,
                kc,
                x,
                c
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return Err(dim_err!(
                "conv2d kernel {:?} does not fit input {:?} with padding {}",
                k,
                x,
                pad
            ));
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image into a `(C*kh*kw) x (Ho*Wo)` column matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.wo + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                x[(ch * self.h + ii as usize) * self.w + jj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ch in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ch * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            dx[(ch * self.h + ii as usize) * self.w + jj as usize] +=
                                src[oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (kp, p) = (g.patch_len(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * p;
    let mut out = vec![0.0; g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kp * p] };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cols_ref: &[f64] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut cols);
            &cols
        };
        gemm(
            g.f,
            kp,
            p,
            w,
            false,
            cols_ref,
            false,
            &mut out[s * out_len..(s + 1) * out_len],
            0.0,
        );
    }
    out
}

/// Gradients of a convolution; either side may be skipped.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (kp, p) = (g.patch_len(), g.positions());
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * p;
    let mut cols = vec![0.0; kp * p];
    let mut dcols = vec![0.0; kp * p];
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ds = &dout[s * out_len..(s + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            let cols_ref: &[f64] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut cols);
                &cols
            };
            gemm(g.f, p, kp, ds, false, cols_ref, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(kp, g.f, p, w, true, ds, false, dxs, 1.0);
            } else {
                gemm(kp, g.f, p, w, true, ds, false, &mut dcols, 0.0);
                g.col2im(&dcols, dxs);
            }
        }
    }
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub(crate) fn avg_pool2_forward(shape: &[usize], x: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                dst[i * wo + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
            }
        }
    }
    (vec![n, c, ho, wo], out)
}

pub(crate) fn avg_pool2_backward(shape: &[usize], dout: &[f64], dx: &mut [f64]) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    for plane in 0..n * c {
        let src = &dout[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * src[i * wo + j];
                let r0 = 2 * i * w + 2 * j;
                let r1 = r0 + w;
                dst[r0] += g;
                dst[r0 + 1] += g;
                dst[r1] += g;
                dst[r1 + 1] += g;
            }
        }
    }
}

/// Row-wise `softmax(x / tau)` over the last axis, max-shifted.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / tau).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Row-wise `log softmax(x / tau)` over the last axis.
pub(crate) fn log_softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|&v| ((v - max) / tau).exp()).sum();
        let log_total = total.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max) / tau - log_total;
        }
    }
    out
}

/// Row-wise `log sum exp` over the last axis.
pub(crate) fn logsumexp_rows(x: &[f64], cols: usize) -> Vec<f64> {
    if cols == 0 {
        return vec![f64::NEG_INFINITY; 0];
    }
    x.chunks_exact(cols)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// `log(1 + exp(x))`, switching to `x + log(1 + exp(-x))` above 20.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn transpose_last2(shape: &[usize], x: &[f64]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batches = numel(&shape[..r - 2]);
    let mut out = vec![0.0; x.len()];
    for b in 0..batches {
        let src = &x[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

pub(crate) fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(dim_err!("select_rows on a rank-0 tensor"));
    }
    let row_len = numel(&shape[1..]);
    let mut data = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        if r >= shape[0] {
            return Err(dim_err!("row {} out of range for shape {:?}", r, shape));
        }
        data.extend_from_slice(&x.data()[r * row_len..(r + 1) * row_len]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = rows.len();
    Tensor::new(&out_shape, data)
}

pub(crate) fn concat_last_shape(shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| dim_err!("concat of zero tensors"))?;
    if first.is_empty() {
        return Err(dim_err!("concat of rank-0 tensors"));
    }
    let r = first.len();
    let mut out = first.to_vec();
    out[r - 1] = 0;
    for s in shapes {
        if s.len() != r || s[..r - 1] != first[..r - 1] {
            return Err(dim_err!(
                "concat along last axis needs matching leading extents, got {:?} and {:?}",
                first,
                s
            ));
        }
        out[r - 1] += s[r - 1];
    }
    Ok(out)
}

pub(crate) fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    let out_shape = concat_last_shape(&shapes)?;
    let r = out_shape.len();
    let rows = numel(&out_shape[..r - 1]);
    let mut data = Vec::with_capacity(numel(&out_shape));
    for row in 0..rows {
        for t in parts {
            let w = t.shape()[r - 1];
            data.extend_from_slice(&t.data()[row * w..(row + 1) * w]);
        }
    }
    Tensor::new(&out_shape, data)
}
