//! Layer primitives with explicit forward and backward passes.
//!
//! Every backward function takes the forward inputs plus the upstream
//! gradient and returns gradients with exactly the shapes of the parameters
//! and inputs they belong to.

use crate::error::{ensure, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    /// Parameter gradients, keyed by the parameter's name within the layer.
    pub params: Vec<(&'static str, Tensor)>,
    /// Gradient with respect to the layer input.
    pub input: Tensor,
}

impl LayerGrads {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    fn take(&mut self, name: &str) -> Tensor {
        let idx = self
            .params
            .iter()
            .position(|(n, _)| *n == name)
            .expect("layer gradient present");
        self.params.swap_remove(idx).1
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        ensure!(input.len() == 3, Contract, "conv2d input must be [C,H,W], got {input:?}");
        ensure!(
            kernels.len() == 4,
            Contract,
            "conv2d kernels must be [C_out,C_in,k,k], got {kernels:?}"
        );
        ensure!(
            kernels[2] == kernels[3],
            Contract,
            "conv2d kernels must be square, got {kernels:?}"
        );
        ensure!(
            input[0] == kernels[1],
            Contract,
            "input has {} channels but kernels expect {}",
            input[0],
            kernels[1]
        );
        let k = kernels[2];
        ensure!(k >= 1 && stride >= 1, Contract, "kernel and stride must be >= 1");
        ensure!(
            input[1] + 2 * pad >= k && input[2] + 2 * pad >= k,
            Contract,
            "padded input {}x{} smaller than kernel {k}",
            input[1] + 2 * pad,
            input[2] + 2 * pad
        );
        Ok(ConvGeometry {
            in_channels: input[0],
            in_h: input[1],
            in_w: input[2],
            out_channels: kernels[0],
            kernel: k,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unfolds the zero-padded input into a `[C_in*k*k, H'*W']` matrix whose
    /// rows are ordered (channel, kernel row, kernel column).
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let p = oh * ow;
        let mut col = vec![0.0; self.patch_len() * p];
        for c in 0..self.in_channels {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`ConvGeometry::im2col`].
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let p = oh * ow;
        let mut out = vec![0.0; self.in_channels * self.in_h * self.in_w];
        for c in 0..self.in_channels {
            let plane = &mut out[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = iy as usize * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Zero-padded 2-D cross-correlation of a `[C_in,H,W]` input with
/// `[C_out,C_in,k,k]` kernels.
///
/// Each output element is accumulated from 0 in (channel, kernel row, kernel
/// column) order.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, pad)?;
    let col = g.im2col(input.data());
    let (p, kl) = (g.out_len(), g.patch_len());
    let mut out = vec![0.0; g.out_channels * p];
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        let w = &kernels.data()[co * kl..(co + 1) * kl];
        for (kk, &wk) in w.iter().enumerate() {
            axpy(row, wk, &col[kk * p..(kk + 1) * p]);
        }
    }
    Tensor::from_vec(&[g.out_channels, g.out_h(), g.out_w()], out)
}

/// Gradients of [`conv2d`]: `"kernels"` and the input.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
    upstream: &Tensor,
) -> Result<LayerGrads> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, pad)?;
    ensure!(
        upstream.shape() == [g.out_channels, g.out_h(), g.out_w()],
        Contract,
        "upstream {:?} does not match conv output [{}, {}, {}]",
        upstream.shape(),
        g.out_channels,
        g.out_h(),
        g.out_w()
    );
    let col = g.im2col(input.data());
    let (p, kl) = (g.out_len(), g.patch_len());
    let up = upstream.data();
    let mut d_kernels = vec![0.0; kernels.len()];
    let mut d_col = vec![0.0; kl * p];
    for co in 0..g.out_channels {
        let up_row = &up[co * p..(co + 1) * p];
        let w = &kernels.data()[co * kl..(co + 1) * kl];
        let dw = &mut d_kernels[co * kl..(co + 1) * kl];
        for kk in 0..kl {
            let col_row = &col[kk * p..(kk + 1) * p];
            dw[kk] = dot(up_row, col_row);
            axpy(&mut d_col[kk * p..(kk + 1) * p], w[kk], up_row);
        }
    }
    Ok(LayerGrads {
        params: vec![("kernels", Tensor::from_vec(kernels.shape(), d_kernels)?)],
        input: Tensor::from_vec(input.shape(), g.col2im(&d_col))?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    ensure!(
        x.shape() == upstream.shape(),
        Contract,
        "relu upstream {:?} vs input {:?}",
        upstream.shape(),
        x.shape()
    );
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub(crate) fn relu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Inputs are clamped to this magnitude before exponentiation.
pub const SIGMOID_CLAMP: f64 = 40.0;

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Multiplies `upstream` by `s(1-s)` where `s = sigmoid(x)`.
pub fn sigmoid_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    ensure!(
        x.shape() == upstream.shape(),
        Contract,
        "sigmoid upstream {:?} vs input {:?}",
        upstream.shape(),
        x.shape()
    );
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| {
            let s = sigmoid_scalar(v);
            u * s * (1.0 - s)
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn check_linear(x: &[f64], weight: &Tensor, bias: Option<&[f64]>) -> Result<(usize, usize)> {
    ensure!(
        weight.ndim() == 2,
        Contract,
        "linear weight must be a matrix, got {:?}",
        weight.shape()
    );
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    ensure!(
        x.len() == cols,
        Contract,
        "linear input has length {} but weight is {rows}x{cols}",
        x.len()
    );
    if let Some(b) = bias {
        ensure!(
            b.len() == rows,
            Contract,
            "linear bias has length {} but weight has {rows} rows",
            b.len()
        );
    }
    Ok((rows, cols))
}

/// `W x + b`; pass `None` for a bias-free map.
pub fn linear(x: &[f64], weight: &Tensor, bias: Option<&[f64]>) -> Result<Vec<f64>> {
    let (_, cols) = check_linear(x, weight, bias)?;
    Ok(weight
        .data()
        .chunks_exact(cols)
        .enumerate()
        .map(|(r, row)| dot(row, x) + bias.map_or(0.0, |b| b[r]))
        .collect())
}

/// Gradients of [`linear`]: `"weight"`, `"bias"` (only when a bias was used)
/// and the input.
pub fn linear_backward(
    x: &[f64],
    weight: &Tensor,
    with_bias: bool,
    upstream: &[f64],
) -> Result<LayerGrads> {
    let (rows, cols) = check_linear(x, weight, None)?;
    ensure!(
        upstream.len() == rows,
        Contract,
        "linear upstream has length {} but output has {rows}",
        upstream.len()
    );
    let mut d_weight = vec![0.0; rows * cols];
    let mut d_input = vec![0.0; cols];
    for (r, &u) in upstream.iter().enumerate() {
        axpy(&mut d_weight[r * cols..(r + 1) * cols], u, x);
        axpy(&mut d_input, u, &weight.data()[r * cols..(r + 1) * cols]);
    }
    let mut params = vec![("weight", Tensor::from_vec(&[rows, cols], d_weight)?)];
    if with_bias {
        params.push(("bias", Tensor::from_vec(&[rows], upstream.to_vec())?));
    }
    Ok(LayerGrads {
        params,
        input: Tensor::from_vec(&[cols], d_input)?,
    })
}

/// Splits a `[L,H,W]` feature map into `stripes` equal horizontal bands and
/// averages each band per channel.
pub fn stripe_avgpool(fmap: &Tensor, stripes: usize) -> Result<Vec<Vec<f64>>> {
    let (l, h, w) = check_stripes(fmap.shape(), stripes)?;
    let rows = h / stripes;
    let scale = 1.0 / (rows * w) as f64;
    let data = fmap.data();
    Ok((0..stripes)
        .map(|s| {
            (0..l)
                .map(|c| {
                    let start = c * h * w + s * rows * w;
                    data[start..start + rows * w].iter().sum::<f64>() * scale
                })
                .collect()
        })
        .collect())
}

pub fn stripe_avgpool_backward(
    shape: &[usize],
    stripes: usize,
    upstream: &[Vec<f64>],
) -> Result<Tensor> {
    let (l, h, w) = check_stripes(shape, stripes)?;
    ensure!(
        upstream.len() == stripes && upstream.iter().all(|u| u.len() == l),
        Contract,
        "stripe upstream must be {stripes} vectors of length {l}"
    );
    let rows = h / stripes;
    let scale = 1.0 / (rows * w) as f64;
    let mut out = Tensor::zeros(shape);
    let data = out.data_mut();
    for (s, up) in upstream.iter().enumerate() {
        for (c, &u) in up.iter().enumerate() {
            let start = c * h * w + s * rows * w;
            data[start..start + rows * w].fill(u * scale);
        }
    }
    Ok(out)
}

fn check_stripes(shape: &[usize], stripes: usize) -> Result<(usize, usize, usize)> {
    ensure!(shape.len() == 3, Contract, "stripe pooling needs [L,H,W], got {shape:?}");
    ensure!(
        stripes >= 1 && shape[1] % stripes == 0,
        Config,
        "feature map height {} is not divisible into {stripes} stripes",
        shape[1]
    );
    Ok((shape[0], shape[1], shape[2]))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn take_param(grads: &mut LayerGrads, name: &str) -> Tensor {
    grads.take(name)
}
