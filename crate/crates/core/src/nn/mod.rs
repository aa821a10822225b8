//! Convolutional network: layer stack, forward/backward passes and SGD training.

pub mod layers;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use layers::{ConvGeom, Switches};

pub use train::{accuracy_on, train, Sgd, TrainConfig};

/// Argmax locations of every max-pooling layer, in layer order.
pub type SwitchRecord = Vec<Switches>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel_size: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    FullyConnected { out_units: usize },
    Softmax,
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv { out_channels, kernel_size, stride, pad } => {
                if out_channels == 0 {
                    return Err(Error::InvalidShape("conv needs at least one filter".into()));
                }
                let g = ConvGeom::new(input, kernel_size, stride, pad)?;
                Ok(vec![out_channels, g.oh, g.ow])
            }
            LayerSpec::MaxPool { window, stride } => {
                let [c, h, w] = *input else {
                    return Err(Error::InvalidShape(format!("pool input must be [C,H,W], got {input:?}")));
                };
                if window == 0 || stride == 0 || h < window || w < window {
                    return Err(Error::InvalidShape(format!(
                        "pool window {window} (stride {stride}) does not fit {h}x{w}"
                    )));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::FullyConnected { out_units } => {
                if out_units == 0 {
                    return Err(Error::InvalidShape("dense layer needs at least one unit".into()));
                }
                Ok(vec![out_units])
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out_channels, kernel_size, stride, pad } => {
                write!(f, "conv:{out_channels}:{kernel_size}:{stride}:{pad}")
            }
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { window, stride } => write!(f, "pool:{window}:{stride}"),
            LayerSpec::FullyConnected { out_units } => write!(f, "fc:{out_units}"),
            LayerSpec::Softmax => f.write_str("softmax"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("bad layer `{s}`")))
        };
        let spec = match (parts[0], parts.len()) {
            ("conv", 5) => LayerSpec::Conv { out_channels: num(1)?, kernel_size: num(2)?, stride: num(3)?, pad: num(4)? },
            ("relu", 1) => LayerSpec::Relu,
            ("pool", 3) => LayerSpec::MaxPool { window: num(1)?, stride: num(2)? },
            ("fc", 2) => LayerSpec::FullyConnected { out_units: num(1)? },
            ("softmax", 1) => LayerSpec::Softmax,
            _ => return Err(Error::InvalidConfig(format!("bad layer `{s}`"))),
        };
        Ok(spec)
    }
}

/// An ordered layer list, written as comma-separated layer tokens,
/// e.g. `conv:16:5:1:2,relu,pool:2:2,fc:2,softmax`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture(pub Vec<LayerSpec>);

impl Architecture {
    /// Three 5×5 conv blocks (16/32/64 filters) with 2×2 pooling, a 256-unit
    /// hidden layer and a two-way softmax.
    pub fn default_stack() -> Architecture {
        use LayerSpec::*;
        let conv = |out_channels| Conv { out_channels, kernel_size: 5, stride: 1, pad: 2 };
        let pool = MaxPool { window: 2, stride: 2 };
        Architecture(vec![
            conv(16),
            Relu,
            pool,
            conv(32),
            Relu,
            pool,
            conv(64),
            Relu,
            pool,
            FullyConnected { out_units: 256 },
            Relu,
            FullyConnected { out_units: 2 },
            Softmax,
        ])
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',').map(str::parse).collect::<Result<Vec<_>>>().map(Architecture)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    fn zeros_like(&self) -> LayerParams {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()).expect("valid shape"),
            bias: Tensor::zeros(self.bias.shape()).expect("valid shape"),
        }
    }
}

/// Per-layer parameter gradients, aligned with [`Network::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Option<LayerParams>>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Gradients {
        Gradients(net.params.iter().map(|p| p.as_ref().map(LayerParams::zeros_like)).collect())
    }

    pub fn accumulate(&mut self, other: &Gradients, alpha: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weight.axpy(alpha, &b.weight).expect("aligned gradients");
                a.bias.axpy(alpha, &b.bias).expect("aligned gradients");
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams>>,
}

/// Everything a forward pass leaves behind for backprop and deconvolution.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input of every layer, in layer order.
    pub inputs: Vec<Tensor>,
    pub switches: SwitchRecord,
    /// Pre-softmax class activations.
    pub logits: Tensor,
    pub probabilities: Tensor,
    cols: Vec<Option<Vec<f64>>>,
}

impl Network {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new(input_shape: [usize; 3], arch: &Architecture, seed: u64) -> Result<Network> {
        let shapes = Self::validate(input_shape, &arch.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.0.len());
        for (layer, in_shape) in arch.0.iter().zip(&shapes) {
            let p = match *layer {
                LayerSpec::Conv { out_channels, kernel_size, .. } => {
                    let c = in_shape[0];
                    let kk = kernel_size * kernel_size;
                    let limit = (6.0 / ((c * kk + out_channels * kk) as f64)).sqrt();
                    let n = out_channels * c * kk;
                    let w = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                    Some(LayerParams {
                        weight: Tensor::from_vec(&[out_channels, c, kernel_size, kernel_size], w)?,
                        bias: Tensor::zeros(&[out_channels])?,
                    })
                }
                LayerSpec::FullyConnected { out_units } => {
                    let fan_in: usize = in_shape.iter().product();
                    let limit = (6.0 / ((fan_in + out_units) as f64)).sqrt();
                    let w = (0..out_units * fan_in).map(|_| rng.gen_range(-limit..limit)).collect();
                    Some(LayerParams {
                        weight: Tensor::from_vec(&[out_units, fan_in], w)?,
                        bias: Tensor::zeros(&[out_units])?,
                    })
                }
                _ => None,
            };
            params.push(p);
        }
        Ok(Network { input_shape, layers: arch.0.clone(), shapes, params })
    }

    /// Builds a network from explicit parameters (one entry per layer, `Some`
    /// exactly for conv and dense layers).
    pub fn from_params(input_shape: [usize; 3], arch: &Architecture, params: Vec<Option<LayerParams>>) -> Result<Network> {
        let shapes = Self::validate(input_shape, &arch.0)?;
        if params.len() != arch.0.len() {
            return Err(Error::ShapeMismatch(format!("{} parameter slots for {} layers", params.len(), arch.0.len())));
        }
        let reference = Network::new(input_shape, arch, 0)?;
        for (i, (p, r)) in params.iter().zip(&reference.params).enumerate() {
            match (p, r) {
                (None, None) => {}
                (Some(p), Some(r)) if p.weight.shape() == r.weight.shape() && p.bias.shape() == r.bias.shape() => {}
                _ => return Err(Error::ShapeMismatch(format!("parameters of layer {i} ({}) do not fit", arch.0[i]))),
            }
        }
        Ok(Network { input_shape, layers: arch.0.clone(), shapes, params })
    }

    /// Returns the input shape of every layer followed by the final output shape.
    fn validate(input_shape: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
        if input_shape.contains(&0) {
            return Err(Error::InvalidShape(format!("input shape {input_shape:?}")));
        }
        let Some((LayerSpec::Softmax, body)) = layers.split_last() else {
            return Err(Error::InvalidConfig("architecture must end with softmax".into()));
        };
        if !matches!(body.last(), Some(LayerSpec::FullyConnected { out_units: 2 })) {
            return Err(Error::InvalidConfig("softmax must follow a 2-unit dense layer".into()));
        }
        if body.contains(&LayerSpec::Softmax) {
            return Err(Error::InvalidConfig("softmax is only allowed as the last layer".into()));
        }
        let mut shapes = vec![input_shape.to_vec()];
        let mut flat = false;
        for layer in layers {
            if flat && matches!(layer, LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. }) {
                return Err(Error::InvalidConfig(format!("{layer} after a dense layer")));
            }
            flat |= matches!(layer, LayerSpec::FullyConnected { .. });
            let next = layer.output_shape(shapes.last().expect("nonempty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn architecture(&self) -> Architecture {
        Architecture(self.layers.clone())
    }

    /// Input shape of layer `i`; `layer_shape(layers().len())` is the output shape.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Index of the final dense layer (the one feeding softmax).
    pub fn final_dense_index(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        if image.shape() != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs network input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(n);
        let mut switches = Vec::new();
        let mut x = image.clone();
        for (layer, p) in self.layers[..n - 1].iter().zip(&self.params) {
            let (next, col) = match *layer {
                LayerSpec::Conv { kernel_size, stride, pad, .. } => {
                    let p = p.as_ref().expect("conv params");
                    let g = ConvGeom::new(x.shape(), kernel_size, stride, pad)?;
                    let c = g.im2col(x.data());
                    (layers::conv_forward_cols(&g, &c, &p.weight, &p.bias), Some(c))
                }
                LayerSpec::Relu => (layers::relu_forward(&x), None),
                LayerSpec::MaxPool { window, stride } => {
                    let (y, sw) = layers::maxpool_forward(&x, window, stride)?;
                    switches.push(sw);
                    (y, None)
                }
                LayerSpec::FullyConnected { .. } => {
                    let p = p.as_ref().expect("dense params");
                    (layers::fc_forward(&x, &p.weight, &p.bias)?, None)
                }
                LayerSpec::Softmax => unreachable!("validated: softmax is last"),
            };
            inputs.push(std::mem::replace(&mut x, next));
            cols.push(col);
        }
        let probabilities = layers::softmax(&x);
        inputs.push(x.clone());
        cols.push(None);
        Ok(ForwardPass { inputs, switches, logits: x, probabilities, cols })
    }

    /// Convenience: positive-class probability.
    pub fn predict(&self, image: &Tensor) -> Result<f64> {
        Ok(self.forward(image)?.probabilities.data()[1])
    }

    /// Backpropagates `grad_logits` (gradient of a scalar loss with respect to
    /// the pre-softmax activations). The input gradient is computed only when
    /// `want_input_grad` is set.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Tensor, want_input_grad: bool) -> Result<(Gradients, Option<Tensor>)> {
        let n = self.layers.len();
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs logits {:?}", grad_logits.shape(), pass.logits.shape())));
        }
        let mut grads = Gradients(vec![None; n]);
        let mut g = grad_logits.clone();
        let mut pool_idx = pass.switches.len();
        for i in (0..n - 1).rev() {
            let x = &pass.inputs[i];
            let need_input = i > 0 || want_input_grad;
            match self.layers[i] {
                LayerSpec::Conv { kernel_size, stride, pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let geom = ConvGeom::new(x.shape(), kernel_size, stride, pad)?;
                    let cols = pass.cols[i].as_ref().expect("cached patches");
                    let (gw, gb) = layers::conv_grad_params(&geom, &g, cols);
                    grads.0[i] = Some(LayerParams { weight: gw, bias: gb });
                    if need_input {
                        g = layers::conv_grad_input(&geom, &g, &p.weight);
                    }
                }
                LayerSpec::Relu => g = layers::relu_backward(&g, x)?,
                LayerSpec::MaxPool { .. } => {
                    pool_idx -= 1;
                    g = layers::maxpool_backward(&g, &pass.switches[pool_idx])?;
                }
                LayerSpec::FullyConnected { .. } => {
                    let p = self.params[i].as_ref().expect("dense params");
                    let (gi, gw, gb) = layers::fc_backward(&g, x, &p.weight)?;
                    grads.0[i] = Some(LayerParams { weight: gw, bias: gb });
                    g = gi;
                }
                LayerSpec::Softmax => unreachable!(),
            }
        }
        Ok((grads, want_input_grad.then_some(g)))
    }

    /// Softmax cross-entropy of one labelled image and its parameter gradients.
    pub fn loss_and_grad(&self, image: &Tensor, label: usize) -> Result<(f64, Gradients)> {
        let pass = self.forward(image)?;
        let loss = layers::cross_entropy(&pass.logits, label);
        let mut g = pass.probabilities.clone();
        g.data_mut()[label] -= 1.0;
        let (grads, _) = self.backward(&pass, &g, false)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, image: &Tensor, label: usize) -> Result<f64> {
        Ok(layers::cross_entropy(&self.forward(image)?.logits, label))
    }
}
