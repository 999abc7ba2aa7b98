//! Dense row-major `f64` tensors and the raw numeric kernels the tape is built on.
//!
//! Kernels here work on plain values; gradient bookkeeping lives in
//! [`crate::autodiff`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero extents, length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at index {i}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernel outputs whose invariants hold by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// First element; meaningful for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Channel count for an `[N, C, ...]` layout.
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Number of elements per channel slice of one sample, i.e. product of dims after C.
    pub fn spatial(&self) -> usize {
        self.shape.iter().skip(2).product()
    }
}

pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if kh == 0 || kw == 0 || f == 0 {
            return Err(Error::InvalidConfig("zero-size convolution kernel".into()));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("convolution stride must be positive".into()));
        }
        if wc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input has {c} channels but weight expects {wc}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.f, self.oh, self.ow]
    }

    /// Dense multiply-accumulate count for one sample (padding taps included).
    pub fn macs_per_sample(&self) -> u64 {
        (self.f * self.c * self.kh * self.kw * self.oh * self.ow) as u64
    }

    /// Valid output index range along one axis for kernel offset `k`.
    fn out_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - pad < in_len
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi_excl = if in_len + self.pad > k {
            ((in_len + self.pad - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }
}

pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    let x = input.data();
    let wt = weight.data();
    let sample_out = g.f * g.oh * g.ow;
    for_each_chunk(&mut out, sample_out, |n, out_n| {
        let x_n = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        for f in 0..g.f {
            let plane = &mut out_n[f * g.oh * g.ow..(f + 1) * g.oh * g.ow];
            for c in 0..g.c {
                let x_c = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.out_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = wt[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (ox0, ox1) = g.out_range(kj, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let row = &x_c[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut plane[oy * g.ow..(oy + 1) * g.ow];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(g.output_shape().to_vec(), out))
}

/// Gradient of a conv2d output with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, weight: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
    let go = grad_out.data();
    let wt = weight.data();
    for_each_chunk(&mut gx, g.c * g.h * g.w, |n, gx_n| {
        let go_n = &go[n * g.f * g.oh * g.ow..(n + 1) * g.f * g.oh * g.ow];
        for f in 0..g.f {
            let plane = &go_n[f * g.oh * g.ow..(f + 1) * g.oh * g.ow];
            for c in 0..g.c {
                let gx_c = &mut gx_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.out_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = wt[((f * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (ox0, ox1) = g.out_range(kj, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let grow = &plane[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &mut gx_c[iy * g.w..(iy + 1) * g.w];
                            for ox in ox0..ox1 {
                                xrow[ox * g.stride + kj - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![g.n, g.c, g.h, g.w], gx)
}

/// Gradient of a conv2d output with respect to its weight.
pub fn conv2d_grad_weight(grad_out: &Tensor, input: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut gw = vec![0.0; g.f * g.c * g.kh * g.kw];
    let go = grad_out.data();
    let x = input.data();
    for_each_chunk(&mut gw, g.c * g.kh * g.kw, |f, gw_f| {
        for n in 0..g.n {
            let plane = &go[(n * g.f + f) * g.oh * g.ow..(n * g.f + f + 1) * g.oh * g.ow];
            for c in 0..g.c {
                let x_c = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oy0, oy1) = g.out_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let (ox0, ox1) = g.out_range(kj, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let xrow = &x_c[iy * g.w..(iy + 1) * g.w];
                            let grow = &plane[oy * g.ow..(oy + 1) * g.ow];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * xrow[ox * g.stride + kj - g.pad];
                            }
                        }
                        gw_f[(c * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    });
    Tensor::from_parts(vec![g.f, g.c, g.kh, g.kw], gw)
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    if input.shape().len() != 2 || weight.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "linear expects [N,D] input and [K,D] weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (k, wd) = (weight.shape()[0], weight.shape()[1]);
    if d != wd {
        return Err(Error::ShapeMismatch(format!(
            "linear inner dims differ: input {d}, weight {wd}"
        )));
    }
    Ok((n, d, k))
}

/// `input · weightᵀ` for `input: [N, D]`, `weight: [K, D]`.
pub fn linear(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, d, k) = linear_dims(input, weight)?;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; n * k];
    for_each_chunk(&mut out, k, |i, row| {
        let xi = &x[i * d..(i + 1) * d];
        for (j, o) in row.iter_mut().enumerate() {
            let wj = &w[j * d..(j + 1) * d];
            *o = xi.iter().zip(wj).map(|(a, b)| a * b).sum();
        }
    });
    Ok(Tensor::from_parts(vec![n, k], out))
}

pub(crate) fn linear_grads(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    let go = grad_out.data();
    let x = input.data();
    let w = weight.data();
    let mut gx = vec![0.0; n * d];
    for_each_chunk(&mut gx, d, |i, row| {
        for j in 0..k {
            let g = go[i * k + j];
            for (r, wv) in row.iter_mut().zip(&w[j * d..(j + 1) * d]) {
                *r += g * wv;
            }
        }
    });
    let mut gw = vec![0.0; k * d];
    for_each_chunk(&mut gw, d, |j, row| {
        for i in 0..n {
            let g = go[i * k + j];
            for (r, xv) in row.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *r += g * xv;
            }
        }
    });
    (
        Tensor::from_parts(vec![n, d], gx),
        Tensor::from_parts(vec![k, d], gw),
    )
}

/// Non-overlapping `k × k` average pooling over `[N, C, H, W]`; trailing rows/cols are dropped.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    if input.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "avg_pool2d expects a 4-d input, got {:?}",
            input.shape()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("pool size must be positive".into()));
    }
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch(format!(
            "pool size {k} exceeds spatial extent {h}x{w}"
        )));
    }
    let x = input.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (p, plane) in out.chunks_mut(oh * ow).enumerate() {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xp[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                plane[oy * ow + ox] = acc * inv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub(crate) fn avg_pool2d_grad(grad_out: &Tensor, input_shape: &[usize], k: usize) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let go = grad_out.data();
    let inv = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; n * c * h * w];
    for (p, plane) in gx.chunks_mut(h * w).enumerate() {
        let gp = &go[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gp[oy * ow + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        plane[(oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

/// Per-channel mean and biased variance over batch and spatial dims of `[N, C, ...]`.
///
/// Summation runs sample-major then spatial, so results are reproducible bit for bit.
pub fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.shape().len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "batch_stats expects [N, C, ...], got {:?}",
            x.shape()
        )));
    }
    let (n, c, sp) = (x.shape()[0], x.channels(), x.spatial());
    if n * sp == 0 {
        return Err(Error::EmptyBatch);
    }
    let count = (n * sp) as f64;
    let data = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (ch, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
        let mut acc = 0.0;
        for s in 0..n {
            acc += data[(s * c + ch) * sp..(s * c + ch + 1) * sp].iter().sum::<f64>();
        }
        *m = acc / count;
        let mut acc2 = 0.0;
        for s in 0..n {
            acc2 += data[(s * c + ch) * sp..(s * c + ch + 1) * sp]
                .iter()
                .map(|&val| (val - *m) * (val - *m))
                .sum::<f64>();
        }
        *v = acc2 / count;
    }
    Ok((
        Tensor::from_parts(vec![c], mean),
        Tensor::from_parts(vec![c], var),
    ))
}
