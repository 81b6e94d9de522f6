//! Layers, networks, loss and optimizers.

mod batchnorm;
mod layers;
mod loss;
mod optim;

use rand::Rng;

pub use batchnorm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use layers::{Flatten, FullConv, Linear, MaxPool, Relu};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use optim::{Optimizer, OptimizerConfig, StepDecay};

use crate::error::{Error, Result};
use crate::slbf::{SlbfConv, SlbfLayerConfig};
use crate::tensor::{ConvGeometry, Tensor4};

/// A trainable parameter and the gradient from the latest backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }
}

/// One entry of a [`NetworkSpec`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    SlbfConv(SlbfLayerConfig),
    Conv { geometry: ConvGeometry, bias: bool },
    MaxPool { kernel: usize, stride: usize },
    BatchNorm { affine: bool },
    Relu,
    Flatten,
    Linear { inputs: usize, outputs: usize },
    /// Loss head; only allowed as the last entry.
    SoftmaxCrossEntropy,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::SlbfConv(_) => "slbf_conv",
            LayerSpec::Conv { .. } => "full_conv",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "fully_connected",
            LayerSpec::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

/// Ordered layer list over `[c, h, w]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

fn conv_out(g: &ConvGeometry, [c, h, w]: [usize; 3], idx: usize) -> Result<[usize; 3]> {
    if c != g.in_channels {
        return Err(Error::dim(format!(
            "layer {idx}: conv expects {} channels, got {c}",
            g.in_channels
        )));
    }
    let (ho, wo) = g.output_hw(h, w)?;
    Ok([g.out_channels, ho, wo])
}

impl NetworkSpec {
    /// Per-layer output dims; checks that adjacent layers fit together.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.input.contains(&0) {
            return Err(Error::dim("network input dims must be positive"));
        }
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::SlbfConv(cfg) => {
                    cfg.shape()?;
                    conv_out(&cfg.geometry, cur, idx)?
                }
                LayerSpec::Conv { geometry, .. } => {
                    geometry.validate()?;
                    conv_out(geometry, cur, idx)?
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    let (h, w) = MaxPool::new(*kernel, *stride)?.output_hw(cur[1], cur[2])?;
                    [cur[0], h, w]
                }
                LayerSpec::BatchNorm { .. } | LayerSpec::Relu => cur,
                LayerSpec::Flatten => [cur.iter().product(), 1, 1],
                LayerSpec::Linear { inputs, outputs } => {
                    if cur[1] != 1 || cur[2] != 1 {
                        return Err(Error::dim(format!("layer {idx}: fully_connected needs a flatten first")));
                    }
                    if cur[0] != *inputs {
                        return Err(Error::dim(format!(
                            "layer {idx}: fully_connected expects {inputs} inputs, got {}",
                            cur[0]
                        )));
                    }
                    [*outputs, 1, 1]
                }
                LayerSpec::SoftmaxCrossEntropy => {
                    if idx + 1 != self.layers.len() {
                        return Err(Error::dim("softmax_cross_entropy must be the last layer"));
                    }
                    if cur[1] != 1 || cur[2] != 1 {
                        return Err(Error::dim("softmax_cross_entropy needs flat logits"));
                    }
                    cur
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Number of logits produced by the network.
    pub fn classes(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        let last = shapes.last().copied().unwrap_or(self.input);
        Ok(last.iter().product())
    }

    pub fn build<R: Rng>(&self, rng: &mut R) -> Result<Network> {
        let shapes = self.shapes()?;
        let mut layers = Vec::new();
        let mut cur = self.input;
        for (spec, &next) in self.layers.iter().zip(&shapes) {
            let layer = match spec {
                LayerSpec::SlbfConv(cfg) => Some(Layer::Slbf(SlbfConv::new_trainable(*cfg, rng)?)),
                LayerSpec::Conv { geometry, bias } => Some(Layer::Conv(FullConv::new(*geometry, *bias, rng)?)),
                LayerSpec::MaxPool { kernel, stride } => Some(Layer::MaxPool(MaxPool::new(*kernel, *stride)?)),
                LayerSpec::BatchNorm { affine } => Some(Layer::BatchNorm(BatchNorm::new(cur[0], *affine))),
                LayerSpec::Relu => Some(Layer::Relu(Relu::default())),
                LayerSpec::Flatten => Some(Layer::Flatten(Flatten::default())),
                LayerSpec::Linear { inputs, outputs } => Some(Layer::Linear(Linear::new(*inputs, *outputs, rng)?)),
                LayerSpec::SoftmaxCrossEntropy => None,
            };
            layers.extend(layer);
            cur = next;
        }
        Network::new(self.input, layers)
    }
}

/// A built layer.
#[derive(Clone, Debug)]
pub enum Layer {
    Slbf(SlbfConv),
    Conv(FullConv),
    MaxPool(MaxPool),
    BatchNorm(BatchNorm),
    Relu(Relu),
    Flatten(Flatten),
    Linear(Linear),
}

impl Layer {
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Slbf(l) => l.forward_train(x),
            Layer::Conv(l) => l.forward_train(x),
            Layer::MaxPool(l) => l.forward_train(x),
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Relu(l) => l.forward_train(x),
            Layer::Flatten(l) => l.forward_train(x),
            Layer::Linear(l) => l.forward_train(x),
        }
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Slbf(l) => l.infer(x),
            Layer::Conv(l) => l.infer(x),
            Layer::MaxPool(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::Flatten(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Slbf(l) => l.backward(grad_out),
            Layer::Conv(l) => l.backward(grad_out),
            Layer::MaxPool(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::Flatten(l) => l.backward(grad_out),
            Layer::Linear(l) => l.backward(grad_out),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Slbf(l) => l.params_mut(),
            Layer::Conv(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Linear(l) => l.params_mut(),
            Layer::MaxPool(_) | Layer::Relu(_) | Layer::Flatten(_) => Vec::new(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Slbf(_) => "slbf_conv",
            Layer::Conv(_) => "full_conv",
            Layer::MaxPool(_) => "max_pool",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu(_) => "relu",
            Layer::Flatten(_) => "flatten",
            Layer::Linear(_) => "fully_connected",
        }
    }
}

/// A layer stack ending in logits; the loss is applied by the caller.
#[derive(Clone, Debug)]
pub struct Network {
    input: [usize; 3],
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input.contains(&0) {
            return Err(Error::dim("network input dims must be positive"));
        }
        Ok(Self { input, layers })
    }

    pub fn input(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if [c, h, w] != self.input {
            return Err(Error::dim(format!(
                "network expects input {:?}, got {:?}",
                self.input,
                [c, h, w]
            )));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward_train(&cur)?;
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn predict(&self, x: &Tensor4) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }

    pub fn backward(&mut self, grad_logits: &Tensor4) -> Result<Tensor4> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// True when every proxy is finite.
    pub fn proxies_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Slbf(s) => s.proxies().map_or(true, |p| p.is_finite()),
            _ => true,
        })
    }

    /// Converts every SLBF layer to inference form (realized bank and
    /// selectors, no proxies).
    pub fn freeze(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            if let Layer::Slbf(s) = layer {
                s.freeze()?;
            }
        }
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Slbf(s) => s.proxies().is_none(),
            _ => true,
        })
    }
}
