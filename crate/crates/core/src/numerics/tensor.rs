use std::fmt;

use crate::error::{shape_err, HscError, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Spatial output size of a strided, padded convolution or pooling window.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err("new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// In-place `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Tensor, factor: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add_scaled", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            (&self.data, k, 1),
            (&other.data, m, 1),
            &mut out,
            0.0,
        );
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(shape_err("transpose", &self.shape, &[]));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| HscError::Config("concat of zero tensors".into()))?;
        if first.shape.is_empty() {
            return Err(shape_err("concat_channels", &first.shape, &[]));
        }
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(shape_err("concat_channels", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start > end || end > self.shape[0] {
            return Err(shape_err("slice_channels", &self.shape, &[start, end]));
        }
        let inner = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * inner..end * inner].to_vec())
    }

    fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(shape_err(op, &self.shape, &[0, 0, 0]));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// 2-D cross-correlation. `self` is `(C, H, W)`, `weight` is `(O, C, KH, KW)`,
    /// `bias` (if any) is `(O)`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (c, h, w) = self.chw("conv2d")?;
        if weight.shape.len() != 4 || weight.shape[1] != c {
            return Err(shape_err("conv2d", &self.shape, &weight.shape));
        }
        let (o, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
        if let Some(b) = bias {
            if b.shape != [o] {
                return Err(shape_err("conv2d bias", &weight.shape, &b.shape));
            }
        }
        let ho = conv_out_size(h, kh, stride, pad)
            .ok_or_else(|| shape_err("conv2d", &self.shape, &weight.shape))?;
        let wo = conv_out_size(w, kw, stride, pad)
            .ok_or_else(|| shape_err("conv2d", &self.shape, &weight.shape))?;
        let geo = ConvGeometry {
            h,
            w,
            ho,
            wo,
            stride,
            pad,
        };
        let n = ho * wo;
        let rows = c * kh * kw;
        let cols = geo.im2col(&self.data, c, kh, kw);
        let mut out = vec![0.0; o * n];
        if let Some(b) = bias {
            for (plane, &bv) in out.chunks_exact_mut(n).zip(&b.data) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
        }
        gemm(
            o,
            rows,
            n,
            (&weight.data, rows, 1),
            (&cols, n, 1),
            &mut out,
            1.0,
        );
        Tensor::new(vec![o, ho, wo], out)
    }

    /// Gradients of `conv2d` given the upstream gradient `grad_out`.
    /// Returns `(d_input, d_weight, d_bias)`; each is only computed when requested.
    pub fn conv2d_backward(
        &self,
        weight: &Tensor,
        grad_out: &Tensor,
        stride: usize,
        pad: usize,
        want_input: bool,
        want_weight: bool,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
        let (c, h, w) = self.chw("conv2d_backward")?;
        let (o, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
        let (go, ho, wo) = grad_out.chw("conv2d_backward")?;
        if go != o {
            return Err(shape_err("conv2d_backward", &weight.shape, &grad_out.shape));
        }
        let geo = ConvGeometry {
            h,
            w,
            ho,
            wo,
            stride,
            pad,
        };
        let n = ho * wo;
        let rows = c * kh * kw;
        let db: Vec<f64> = grad_out
            .data
            .chunks_exact(n)
            .map(|g| g.iter().sum())
            .collect();
        let dw = want_weight.then(|| {
            let cols = geo.im2col(&self.data, c, kh, kw);
            let mut dw = vec![0.0; weight.data.len()];
            // dW = G colsᵀ
            gemm(
                o,
                n,
                rows,
                (&grad_out.data, n, 1),
                (&cols, 1, n),
                &mut dw,
                0.0,
            );
            dw
        });
        let dx = want_input.then(|| {
            // d cols = Wᵀ G
            let mut dcols = vec![0.0; rows * n];
            gemm(
                rows,
                o,
                n,
                (&weight.data, 1, rows),
                (&grad_out.data, n, 1),
                &mut dcols,
                0.0,
            );
            geo.col2im(&dcols, c, kh, kw)
        });
        Ok((
            dx.map(|d| Tensor {
                shape: self.shape.clone(),
                data: d,
            }),
            dw.map(|d| Tensor {
                shape: weight.shape.clone(),
                data: d,
            }),
            Tensor::from_vec(db),
        ))
    }

    /// Non-overlapping mean pooling with a square window of size `k`.
    pub fn pool_mean(&self, k: usize) -> Result<Tensor> {
        let (c, h, w) = self.chw("pool_mean")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("pool_mean", &self.shape, &[k, k]));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * ho + y / k) * wo + x / k] += self.data[(ch * h + y) * w + x] * inv;
                }
            }
        }
        Tensor::new(vec![c, ho, wo], out)
    }

    /// Adjoint of `pool_mean`: spreads each pooled gradient evenly over its window.
    pub fn pool_mean_backward(grad: &Tensor, k: usize) -> Result<Tensor> {
        let (c, ho, wo) = grad.chw("pool_mean_backward")?;
        let (h, w) = (ho * k, wo * k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * w + x] = grad.data[(ch * ho + y / k) * wo + x / k] * inv;
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let (c, h, w) = self.chw("upsample2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = self.data[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Tensor::new(vec![c, h2, w2], out)
    }

    /// Adjoint of `upsample2x` (window sum).
    pub fn upsample2x_backward(grad: &Tensor) -> Result<Tensor> {
        Ok(grad.pool_mean(2)?.scale(4.0))
    }
}

/// Valid-index bookkeeping shared by the convolution kernels.
/// `C (m x n) = A (m x k) B (k x n) + beta C` for row-major `C`; `A` and `B`
/// are given as `(data, row stride, column stride)`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides address elements inside the checked slice lengths
    // and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    /// Unfolds `(C, H, W)` input into `C*KH*KW` rows of `HO*WO` values, zero
    /// where the window reaches into the padding.
    fn im2col(&self, input: &[f64], c: usize, kh: usize, kw: usize) -> Vec<f64> {
        let n = self.ho * self.wo;
        let plane = self.h * self.w;
        let mut cols = vec![0.0; c * kh * kw * n];
        for (r, col) in cols.chunks_exact_mut(n).enumerate() {
            let (ic, ky, kx) = (r / (kh * kw), (r / kw) % kh, r % kw);
            let src = &input[ic * plane..(ic + 1) * plane];
            self.for_each_row(ky, kx, |oy, iy, ox0, ox1, ix0| {
                let dst = &mut col[oy * self.wo + ox0..oy * self.wo + ox1];
                if self.stride == 1 {
                    dst.copy_from_slice(&src[iy * self.w + ix0..iy * self.w + ix0 + (ox1 - ox0)]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = src[iy * self.w + ix0 + j * self.stride];
                    }
                }
            });
        }
        cols
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters rows back onto the input.
    fn col2im(&self, cols: &[f64], c: usize, kh: usize, kw: usize) -> Vec<f64> {
        let n = self.ho * self.wo;
        let plane = self.h * self.w;
        let mut out = vec![0.0; c * plane];
        for (r, col) in cols.chunks_exact(n).enumerate() {
            let (ic, ky, kx) = (r / (kh * kw), (r / kw) % kh, r % kw);
            let dst = &mut out[ic * plane..(ic + 1) * plane];
            self.for_each_row(ky, kx, |oy, iy, ox0, ox1, ix0| {
                let src = &col[oy * self.wo + ox0..oy * self.wo + ox1];
                for (j, &v) in src.iter().enumerate() {
                    dst[iy * self.w + ix0 + j * self.stride] += v;
                }
            });
        }
        out
    }

    /// Calls `f(oy, iy, ox_start, ox_end, ix_start)` for every output row whose
    /// input row is in bounds, restricted to the in-bounds output column range.
    #[inline]
    fn for_each_row(
        &self,
        ky: usize,
        kx: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize),
    ) {
        let s = self.stride as isize;
        let pad = self.pad as isize;
        let lo = |k: isize| -> isize {
            // smallest o >= 0 with o*s + k - pad >= 0
            let need = pad - k;
            if need <= 0 {
                0
            } else {
                (need + s - 1) / s
            }
        };
        let hi = |k: isize, n: isize, outn: isize| -> isize {
            // largest o < outn with o*s + k - pad <= n - 1, exclusive bound returned
            let top = n - 1 + pad - k;
            if top < 0 {
                0
            } else {
                (top / s + 1).min(outn)
            }
        };
        let (ky, kx) = (ky as isize, kx as isize);
        let oy0 = lo(ky);
        let oy1 = hi(ky, self.h as isize, self.ho as isize);
        let ox0 = lo(kx);
        let ox1 = hi(kx, self.w as isize, self.wo as isize);
        if ox0 >= ox1 {
            return;
        }
        let ix0 = (ox0 * s + kx - pad) as usize;
        for oy in oy0..oy1 {
            let iy = (oy * s + ky - pad) as usize;
            f(oy as usize, iy, ox0 as usize, ox1 as usize, ix0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = numel(shape);
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    /// Direct definition of the padded cross-correlation.
    fn conv_naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
        let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((oc * c + ic) * kh + ky) * kw + kx]
                                    * x.data[(ic * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.data[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = ramp(&[3, 4]);
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = ramp(&[2, 3]).matmul(&ramp(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn one_by_one_kernel_doubles() {
        let x = ramp(&[1, 5, 6]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y, x.scale(2.0));
    }

    #[test]
    fn concat_channels_shape() {
        let a = Tensor::zeros(&[2, 4, 4]);
        let b = Tensor::zeros(&[3, 4, 4]);
        assert_eq!(
            Tensor::concat_channels(&[&a, &b]).unwrap().shape(),
            &[5, 4, 4]
        );
        assert!(Tensor::concat_channels(&[&a, &Tensor::zeros(&[3, 4, 5])]).is_err());
    }

    #[test]
    fn conv_output_size_rule() {
        for (h, k, s, p) in [
            (8, 3, 1, 1),
            (8, 3, 2, 1),
            (7, 3, 2, 0),
            (9, 1, 3, 0),
            (5, 5, 1, 2),
        ] {
            let x = ramp(&[2, h, h]);
            let w = ramp(&[3, 2, k, k]);
            let y = x.conv2d(&w, None, s, p).unwrap();
            let expect = (h + 2 * p - k) / s + 1;
            assert_eq!(y.shape(), &[3, expect, expect]);
        }
    }

    #[test]
    fn conv_matches_definition() {
        for (s, p) in [(1, 1), (2, 1), (1, 0), (2, 0), (3, 2)] {
            let x = ramp(&[3, 7, 6]);
            let w = ramp(&[4, 3, 3, 3]);
            let fast = x.conv2d(&w, None, s, p).unwrap();
            let slow = conv_naive(&x, &w, s, p);
            assert!(
                fast.max_abs_diff(&slow).unwrap() < 1e-12,
                "stride {s} pad {p}"
            );
        }
    }

    #[test]
    fn dirac_kernel_preserves_interior() {
        let x = ramp(&[2, 6, 6]);
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        w.data[4] = 1.0;
        w.data[((2 + 1) * 3 + 1) * 3 + 1] = 1.0;
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and = <w, dW(g)>
        for (s, p) in [(1, 1), (2, 1), (2, 0)] {
            let x = ramp(&[3, 6, 6]);
            let w = ramp(&[2, 3, 3, 3]).scale(0.5);
            let y = x.conv2d(&w, None, s, p).unwrap();
            let g = y.map(|v| (v * 3.1).cos());
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let (dx, dw, _) = x.conv2d_backward(&w, &g, s, p, true, true).unwrap();
            let via_x: f64 = x
                .data
                .iter()
                .zip(&dx.unwrap().data)
                .map(|(a, b)| a * b)
                .sum();
            let via_w: f64 = w
                .data
                .iter()
                .zip(&dw.unwrap().data)
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - via_x).abs() < 1e-9);
            assert!((lhs - via_w).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let x = ramp(&[2, 4, 4]);
        let up = x.upsample2x().unwrap();
        assert_eq!(up.shape(), &[2, 8, 8]);
        assert_eq!(up.pool_mean(2).unwrap(), x);
        let g = ramp(&[2, 8, 8]);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = Tensor::upsample2x_backward(&g).unwrap();
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn reshape_checks_count() {
        assert!(ramp(&[2, 3]).reshape(&[3, 2]).is_ok());
        assert!(ramp(&[2, 3]).reshape(&[4, 2]).is_err());
    }
}
