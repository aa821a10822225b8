//! Deconvnet projection of a class unit back to input space.
//!
//! The selected pre-softmax unit is the only nonzero activation at the top.
//! Its value is sent back through the network: dense layers by transposed
//! weights, rectifiers by rectifying the backward signal, pooling layers by
//! unpooling into the recorded switches and convolutions by transposed
//! convolution with the learned filters. Masked modes zero the negative or
//! positive weights of the final dense layer only and drop its bias, so that
//! `a_full = a_pos + a_neg + bias` for every image.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::save_png;
use crate::error::{Error, Result};
use crate::nn::layers::{conv_transpose, fc_transpose, Switches};
use crate::nn::{ForwardPass, LayerSpec, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Full,
    PositiveOnly,
    NegativeOnly,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Full, MaskMode::PositiveOnly, MaskMode::NegativeOnly];

    fn keep(self, w: f64) -> f64 {
        match self {
            MaskMode::Full => w,
            MaskMode::PositiveOnly => w.max(0.0),
            MaskMode::NegativeOnly => w.min(0.0),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Full => "full",
            MaskMode::PositiveOnly => "positive",
            MaskMode::NegativeOnly => "negative",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MaskMode::Full),
            "positive" => Ok(MaskMode::PositiveOnly),
            "negative" => Ok(MaskMode::NegativeOnly),
            _ => Err(Error::InvalidConfig(format!("unknown mask mode `{s}`"))),
        }
    }
}

/// How rectifiers treat the backward signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardRelu {
    /// Rectify the signal itself.
    #[default]
    Deconvnet,
    /// Gate the signal by the forward activation, as in backpropagation.
    Backprop,
}

impl fmt::Display for BackwardRelu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardRelu::Deconvnet => "deconvnet",
            BackwardRelu::Backprop => "backprop",
        })
    }
}

impl FromStr for BackwardRelu {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deconvnet" => Ok(BackwardRelu::Deconvnet),
            "backprop" => Ok(BackwardRelu::Backprop),
            _ => Err(Error::InvalidConfig(format!("unknown backward relu `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    /// Signed projection with the network's input shape.
    pub image: Tensor,
    pub attribute: String,
    pub mask_mode: MaskMode,
    pub class_index: usize,
    pub n_examples_averaged: usize,
    /// Target unit activation (mean over examples for aggregated images).
    pub target_activation: f64,
    /// Set when the network had no nonzero weight and the image is zero.
    pub degenerate: bool,
}

/// Pre-softmax activation of `class_index` under `mode`; masked modes omit the bias.
pub fn target_activation(net: &Network, pass: &ForwardPass, class_index: usize, mode: MaskMode) -> Result<f64> {
    let fi = net.final_dense_index();
    let p = net.params()[fi].as_ref().expect("final dense params");
    let n_in = p.weight.shape()[1];
    let row = class_row(p.weight.data(), n_in, class_index)?;
    let x = pass.inputs[fi].data();
    let dot: f64 = row.iter().zip(x).map(|(&w, &x)| mode.keep(w) * x).sum();
    Ok(match mode {
        MaskMode::Full => dot + p.bias.data()[class_index],
        _ => dot,
    })
}

fn class_row(weights: &[f64], n_in: usize, class_index: usize) -> Result<&[f64]> {
    weights
        .get(class_index * n_in..(class_index + 1) * n_in)
        .ok_or_else(|| Error::InvalidConfig(format!("class index {class_index} out of range")))
}

/// Writes each pooled value at its recorded flat index; everything else is zero.
pub fn unpool(pooled: &Tensor, switches: &Switches, original_shape: &[usize]) -> Result<Tensor> {
    if pooled.shape() != switches.output_shape.as_slice() || switches.indices.len() != pooled.len() {
        return Err(Error::ShapeMismatch(format!(
            "pooled {:?} vs recorded {:?} ({} switches)",
            pooled.shape(),
            switches.output_shape,
            switches.indices.len()
        )));
    }
    let mut out = Tensor::zeros(original_shape)?;
    let len = out.len();
    let dst = out.data_mut();
    for (&v, &idx) in pooled.data().iter().zip(&switches.indices) {
        if idx >= len {
            return Err(Error::CorruptSwitches(format!("index {idx} outside shape {original_shape:?}")));
        }
        dst[idx] = v;
    }
    Ok(out)
}

fn is_zero_network(net: &Network) -> bool {
    net.params().iter().flatten().all(|p| p.weight.max_abs() == 0.0 && p.bias.max_abs() == 0.0)
}

/// Projects one image's class unit to input space.
pub fn deconv_single(net: &Network, image: &Tensor, class_index: usize, mode: MaskMode, relu: BackwardRelu) -> Result<FeatureImage> {
    let pass = net.forward(image)?;
    let a = target_activation(net, &pass, class_index, mode)?;
    let mut fi = FeatureImage {
        image: Tensor::zeros(image.shape())?,
        attribute: String::new(),
        mask_mode: mode,
        class_index,
        n_examples_averaged: 1,
        target_activation: a,
        degenerate: false,
    };
    if is_zero_network(net) {
        log::warn!("degenerate network: all parameters are zero, returning a zero feature image");
        fi.degenerate = true;
        return Ok(fi);
    }

    let top = net.final_dense_index();
    let p = net.params()[top].as_ref().expect("final dense params");
    let n_in = p.weight.shape()[1];
    let row = class_row(p.weight.data(), n_in, class_index)?;
    let masked: Vec<f64> = row.iter().map(|&w| a * mode.keep(w)).collect();
    let mut signal = Tensor::from_vec(pass.inputs[top].shape(), masked)?;

    let mut pool_idx = pass.switches.len();
    for i in (0..top).rev() {
        let x = &pass.inputs[i];
        signal = match net.layers()[i] {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = net.params()[i].as_ref().expect("conv params");
                conv_transpose(&signal, &p.weight, x.shape(), stride, pad)?
            }
            LayerSpec::Relu => {
                let data = match relu {
                    BackwardRelu::Deconvnet => signal.data().iter().map(|&s| s.max(0.0)).collect(),
                    BackwardRelu::Backprop => {
                        signal.data().iter().zip(x.data()).map(|(&s, &x)| if x > 0.0 { s } else { 0.0 }).collect()
                    }
                };
                Tensor::from_vec(x.shape(), data)?
            }
            LayerSpec::MaxPool { .. } => {
                pool_idx -= 1;
                unpool(&signal, &pass.switches[pool_idx], x.shape())?
            }
            LayerSpec::FullyConnected { .. } => {
                let p = net.params()[i].as_ref().expect("dense params");
                fc_transpose(&signal, &p.weight, x.shape())?
            }
            LayerSpec::Softmax => unreachable!("softmax is the last layer"),
        };
    }
    fi.image = signal;
    Ok(fi)
}

/// Mean projection over the examples labelled `class_index`. Each example is
/// `(network, preprocessed image, label)`, so out-of-fold images can be
/// projected through the network of the fold that held them out. The sum is
/// taken in input order.
pub fn mean_feature(
    examples: &[(&Network, &Tensor, usize)],
    attribute: &str,
    class_index: usize,
    mode: MaskMode,
    relu: BackwardRelu,
) -> Result<FeatureImage> {
    let members: Vec<_> = examples.iter().filter(|e| e.2 == class_index).collect();
    if members.is_empty() {
        return Err(Error::EmptyClass(class_index));
    }
    let singles: Vec<FeatureImage> = members
        .par_iter()
        .map(|(net, img, _)| deconv_single(net, img, class_index, mode, relu))
        .collect::<Result<_>>()?;
    let n = singles.len() as f64;
    let mut sum = Tensor::zeros(singles[0].image.shape())?;
    let mut act = 0.0;
    for s in &singles {
        sum.axpy(1.0, &s.image)?;
        act += s.target_activation;
    }
    Ok(FeatureImage {
        image: sum.scale(1.0 / n),
        attribute: attribute.to_string(),
        mask_mode: mode,
        class_index,
        n_examples_averaged: singles.len(),
        target_activation: act / n,
        degenerate: singles.iter().all(|s| s.degenerate),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEnergy {
    /// `Σ|channel c| / Σ|all|`; all zero when `zero_energy` is set.
    pub fractions: Vec<f64>,
    pub zero_energy: bool,
}

pub fn channel_energy_report(fi: &FeatureImage) -> ChannelEnergy {
    let c = fi.image.shape().first().copied().unwrap_or(0);
    let plane = fi.image.len() / c.max(1);
    let per: Vec<f64> = fi.image.data().chunks(plane.max(1)).map(|ch| ch.iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = per.iter().sum();
    if total == 0.0 {
        return ChannelEnergy { fractions: vec![0.0; per.len()], zero_energy: true };
    }
    ChannelEnergy { fractions: per.iter().map(|e| e / total).collect(), zero_energy: false }
}

/// Symmetric display map `128 + 127·v/max|v|` with one scale for all channels.
pub fn display_values(fi: &FeatureImage) -> Tensor {
    let m = fi.image.max_abs();
    let data = fi
        .image
        .data()
        .iter()
        .map(|&v| if m > 0.0 { 128.0 + 127.0 * v / m } else { 128.0 })
        .collect();
    Tensor::from_vec(fi.image.shape(), data).expect("same shape")
}

pub fn render_png(fi: &FeatureImage, path: &Path) -> Result<()> {
    save_png(path, &display_values(fi))
}
