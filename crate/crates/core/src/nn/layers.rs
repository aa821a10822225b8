//! Layer primitives: convolution, rectification, max pooling, dense and softmax.
//!
//! Spatial activations are `[channels, height, width]`. Convolution weights are
//! `[out_channels, in_channels, k, k]`; dense weights are `[out, in]` and treat
//! their input as a flat vector whatever its shape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax locations recorded by one max-pooling layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Switches {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    /// Flat index into the pooling input, one per output element.
    pub indices: Vec<usize>,
}

pub(crate) fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::ShapeMismatch(format!("{what}: expected [C,H,W], got {s:?}"))),
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::InvalidShape(format!(
            "kernel {kernel} (stride {stride}) does not fit input {input} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `c = a * b + beta * c` with row-major operands, optionally transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access the strides can produce.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let [c, h, w] = *input else {
            return Err(Error::ShapeMismatch(format!("conv input must be [C,H,W], got {input:?}")));
        };
        let oh = conv_output_size(h, k, stride, pad)?;
        let ow = conv_output_size(w, k, stride, pad)?;
        Ok(ConvGeom { c, h, w, k, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds the padded input into a `(C·k·k) × (oh·ow)` patch matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        let p = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = &input[(ci * self.h + y as usize) * self.w..];
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[oy * self.ow + ox] = src[x as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch values back, summing overlaps.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.c * self.h * self.w];
        let p = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ci * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + y as usize) * self.w;
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                out[base + x as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn check_conv_params(geom: &ConvGeom, weights: &Tensor, bias: &Tensor) -> Result<usize> {
    let [f, wc, kh, kw] = *weights.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv weights must be [F,C,k,k], got {:?}",
            weights.shape()
        )));
    };
    if wc != geom.c || kh != geom.k || kw != geom.k {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {:?} do not match input channels {} / kernel {}",
            weights.shape(),
            geom.c,
            geom.k
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::ShapeMismatch(format!("conv bias {:?}, expected [{f}]", bias.shape())));
    }
    Ok(f)
}

pub(crate) fn conv_forward_cols(geom: &ConvGeom, cols: &[f64], weights: &Tensor, bias: &Tensor) -> Tensor {
    let f = bias.len();
    let p = geom.oh * geom.ow;
    let mut out = Vec::with_capacity(f * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(p));
    }
    gemm(f, geom.rows(), p, weights.data(), false, cols, false, 1.0, &mut out);
    Tensor::from_vec(&[f, geom.oh, geom.ow], out).expect("conv output shape")
}

/// Zero-padded cross-correlation; `output[c]` includes `bias[c]`.
pub fn conv_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let k = weights.shape().get(2).copied().unwrap_or(0);
    let geom = ConvGeom::new(input.shape(), k, stride, pad)?;
    check_conv_params(&geom, weights, bias)?;
    let cols = geom.im2col(input.data());
    Ok(conv_forward_cols(&geom, &cols, weights, bias))
}

pub(crate) fn conv_grad_params(geom: &ConvGeom, grad_out: &Tensor, cols: &[f64]) -> (Tensor, Tensor) {
    let f = grad_out.shape()[0];
    let p = geom.oh * geom.ow;
    let mut gw = vec![0.0; f * geom.rows()];
    gemm(f, p, geom.rows(), grad_out.data(), false, cols, true, 0.0, &mut gw);
    let gb = grad_out.data().chunks_exact(p).map(|row| row.iter().sum()).collect();
    (
        Tensor::from_vec(&[f, geom.c, geom.k, geom.k], gw).expect("weight grad shape"),
        Tensor::from_vec(&[f], gb).expect("bias grad shape"),
    )
}

pub(crate) fn conv_grad_input(geom: &ConvGeom, grad_out: &Tensor, weights: &Tensor) -> Tensor {
    let f = grad_out.shape()[0];
    let p = geom.oh * geom.ow;
    let mut gcols = vec![0.0; geom.rows() * p];
    gemm(geom.rows(), f, p, weights.data(), true, grad_out.data(), false, 0.0, &mut gcols);
    Tensor::from_vec(&[geom.c, geom.h, geom.w], geom.col2im(&gcols)).expect("input grad shape")
}

fn check_grad_out(geom: &ConvGeom, f: usize, grad_out: &Tensor) -> Result<()> {
    if grad_out.shape() != [f, geom.oh, geom.ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv grad_out {:?}, expected [{f}, {}, {}]",
            grad_out.shape(),
            geom.oh,
            geom.ow
        )));
    }
    Ok(())
}

/// Gradients of [`conv_forward`] with respect to input, weights and bias.
pub fn conv_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let k = weights.shape().get(2).copied().unwrap_or(0);
    let geom = ConvGeom::new(cached_input.shape(), k, stride, pad)?;
    let f = weights.shape()[0];
    check_conv_params(&geom, weights, &Tensor::zeros(&[f])?)?;
    check_grad_out(&geom, f, grad_out)?;
    let cols = geom.im2col(cached_input.data());
    let (gw, gb) = conv_grad_params(&geom, grad_out, &cols);
    let gi = conv_grad_input(&geom, grad_out, weights);
    Ok((gi, gw, gb))
}

/// Transposed convolution with the forward filters, mapping a `[F, oh, ow]`
/// signal back onto `input_shape`.
pub fn conv_transpose(signal: &Tensor, weights: &Tensor, input_shape: &[usize], stride: usize, pad: usize) -> Result<Tensor> {
    let k = weights.shape().get(2).copied().unwrap_or(0);
    let geom = ConvGeom::new(input_shape, k, stride, pad)?;
    let f = weights.shape()[0];
    check_conv_params(&geom, weights, &Tensor::zeros(&[f])?)?;
    check_grad_out(&geom, f, signal)?;
    Ok(conv_grad_input(&geom, signal, weights))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Passes `grad_out` where `cached_x > 0`.
pub fn relu_backward(grad_out: &Tensor, cached_x: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cached_x.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", grad_out.shape(), cached_x.shape())));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(cached_x.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(grad_out.shape(), data).expect("same shape"))
}

/// Per-window maximum. Ties go to the lowest flat index.
pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Switches)> {
    let (c, h, w) = chw(x, "maxpool input")?;
    if window == 0 || stride == 0 || h < window || w < window {
        return Err(Error::InvalidShape(format!(
            "pool window {window} (stride {stride}) larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut indices = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ci * h + oy * stride) * w + ox * stride;
                let mut best = src[best_idx];
                // Row-major scan with strict comparison keeps the lowest index on ties.
                for dy in 0..window {
                    let row = (ci * h + oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = src[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                indices.push(best_idx);
            }
        }
    }
    let output_shape = vec![c, oh, ow];
    Ok((
        Tensor::from_vec(&output_shape, out)?,
        Switches { input_shape: x.shape().to_vec(), output_shape, indices },
    ))
}

/// Routes each pooled gradient to its argmax, summing where windows overlap.
pub fn maxpool_backward(grad_out: &Tensor, switches: &Switches) -> Result<Tensor> {
    if grad_out.shape() != switches.output_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "pool grad {:?} vs recorded {:?}",
            grad_out.shape(),
            switches.output_shape
        )));
    }
    let mut gi = Tensor::zeros(&switches.input_shape)?;
    let dst = gi.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(&switches.indices) {
        dst[idx] += g;
    }
    Ok(gi)
}

fn fc_check(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [o, i] = *weights.shape() else {
        return Err(Error::ShapeMismatch(format!("fc weights must be [out,in], got {:?}", weights.shape())));
    };
    if x.len() != i {
        return Err(Error::ShapeMismatch(format!("fc input length {} vs weight in-dimension {i}", x.len())));
    }
    if bias.shape() != [o] {
        return Err(Error::ShapeMismatch(format!("fc bias {:?}, expected [{o}]", bias.shape())));
    }
    Ok((o, i))
}

/// `out[j] = Σ_i w[j,i]·x[i] + b[j]` on the flattened input.
pub fn fc_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, i) = fc_check(x, weights, bias)?;
    let mut out = bias.data().to_vec();
    gemm(o, i, 1, weights.data(), false, x.data(), false, 1.0, &mut out);
    Tensor::from_vec(&[o], out)
}

pub fn fc_backward(grad_out: &Tensor, cached_x: &Tensor, weights: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (o, i) = fc_check(cached_x, weights, &Tensor::zeros(&[weights.shape()[0]])?)?;
    if grad_out.len() != o {
        return Err(Error::ShapeMismatch(format!("fc grad_out length {} vs {o}", grad_out.len())));
    }
    let gi = fc_transpose(grad_out, weights, cached_x.shape())?;
    let mut gw = vec![0.0; o * i];
    gemm(o, 1, i, grad_out.data(), false, cached_x.data(), false, 0.0, &mut gw);
    Ok((gi, Tensor::from_vec(&[o, i], gw)?, Tensor::from_vec(&[o], grad_out.data().to_vec())?))
}

/// `wᵀ · signal`, reshaped to `input_shape`.
pub fn fc_transpose(signal: &Tensor, weights: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [o, i] = *weights.shape() else {
        return Err(Error::ShapeMismatch(format!("fc weights must be [out,in], got {:?}", weights.shape())));
    };
    if signal.len() != o || input_shape.iter().product::<usize>() != i {
        return Err(Error::ShapeMismatch(format!(
            "fc transpose: signal {:?}, weights {:?}, target {input_shape:?}",
            signal.shape(),
            weights.shape()
        )));
    }
    let mut gi = vec![0.0; i];
    gemm(i, o, 1, weights.data(), true, signal.data(), false, 0.0, &mut gi);
    Tensor::from_vec(input_shape, gi)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_vec(logits.shape(), exps.into_iter().map(|e| e / total).collect()).expect("same shape")
}

/// `-ln softmax(logits)[target]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &Tensor, target: usize) -> f64 {
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.data().iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits.data()[target]
}
