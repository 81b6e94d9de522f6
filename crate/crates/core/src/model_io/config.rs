//! Experiment config files.
//!
//! ```text
//! [model]
//! name = lenet5          # optional
//! input = 1x28x28
//!
//! [slbf]                 # defaults for every slbf_conv layer
//! f1 = 1
//! f2 = 1/4
//! scaling = true
//!
//! [layer]                # repeated, in network order
//! type = slbf_conv       # slbf_conv | full_conv | batch_norm | relu | max_pool
//! c_in = 6               # | flatten | fully_connected | softmax_cross_entropy
//! c_out = 16
//! kernel = 5
//!
//! [train]
//! optimizer = sgd        # sgd | adam
//! lr = 0.01
//! ```
//!
//! Layer keys: `slbf_conv` and `full_conv` take `c_in`, `c_out`, `kernel`,
//! `stride` (1), `padding` (0); `slbf_conv` may override `f1`, `f2`,
//! `scaling`; `full_conv` takes `bias` (false). `batch_norm` takes `affine`
//! (true). `max_pool` takes `kernel` and `stride` (= kernel).
//! `fully_connected` takes `inputs`, `outputs`.
//!
//! Train keys and defaults: `optimizer` (sgd), `lr` (0.01), `momentum` (0.9),
//! `weight_decay` (0), `beta1` (0.9), `beta2` (0.999), `eps` (1e-8),
//! `batch_size` (64), `epochs` (20), `seed` (1), `lr_decay` (0.1),
//! `lr_interval` (15), `eval_batch` (1000).
//!
//! Fractions are exact rationals such as `1/2`; decimals are rejected.

use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::ini::{self, Section};
use crate::nn::{LayerSpec, NetworkSpec, OptimizerConfig, StepDecay};
use crate::slbf::SlbfLayerConfig;
use crate::tensor::ConvGeometry;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// `(layer index, s, m, k)` for every SLBF layer.
    pub fn slbf_table(&self) -> Vec<(usize, usize, usize, usize)> {
        self.network
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                LayerSpec::SlbfConv(cfg) => cfg.shape().ok().map(|s| (i, s.s, s.m, s.k())),
                _ => None,
            })
            .collect()
    }
}

#[derive(Default)]
struct SlbfDefaults {
    f1: Option<Fraction>,
    f2: Option<Fraction>,
    scaling: bool,
}

fn parse_input(sec: &Section) -> Result<[usize; 3]> {
    let e = sec.require("input")?;
    let parts: Vec<&str> = e.value.split('x').map(str::trim).collect();
    let dims: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok().filter(|&v| v > 0)).collect();
    match dims.as_deref() {
        Some(&[c, h, w]) => Ok([c, h, w]),
        _ => Err(Error::config("input", format!("expected CxHxW, got {:?} at line {}", e.value, e.line))),
    }
}

fn geometry(sec: &Section) -> Result<ConvGeometry> {
    Ok(ConvGeometry::new(sec.required("c_in")?, sec.required("c_out")?, sec.required("kernel")?)
        .with_stride(sec.parsed_or("stride", 1)?)
        .with_padding(sec.parsed_or("padding", 0)?))
}

fn layer(sec: &Section, defaults: &SlbfDefaults) -> Result<LayerSpec> {
    let kind = sec.require("type")?;
    let conv_keys = ["type", "c_in", "c_out", "kernel", "stride", "padding"];
    Ok(match kind.value.as_str() {
        "slbf_conv" => {
            sec.only(&[&conv_keys[..], &["f1", "f2", "scaling"]].concat())?;
            let f1 = sec.parsed("f1")?.or(defaults.f1).ok_or_else(|| {
                Error::config("f1", format!("slbf_conv at line {} has no f1 and [slbf] sets none", sec.line))
            })?;
            let f2 = sec.parsed("f2")?.or(defaults.f2).ok_or_else(|| {
                Error::config("f2", format!("slbf_conv at line {} has no f2 and [slbf] sets none", sec.line))
            })?;
            let cfg = SlbfLayerConfig::new(geometry(sec)?, f1, f2, sec.parsed_or("scaling", defaults.scaling)?);
            cfg.shape()?;
            LayerSpec::SlbfConv(cfg)
        }
        "full_conv" => {
            sec.only(&[&conv_keys[..], &["bias"]].concat())?;
            let g = geometry(sec)?;
            g.validate()?;
            LayerSpec::Conv {
                geometry: g,
                bias: sec.parsed_or("bias", false)?,
            }
        }
        "batch_norm" => {
            sec.only(&["type", "affine"])?;
            LayerSpec::BatchNorm {
                affine: sec.parsed_or("affine", true)?,
            }
        }
        "relu" => {
            sec.only(&["type"])?;
            LayerSpec::Relu
        }
        "max_pool" => {
            sec.only(&["type", "kernel", "stride"])?;
            let kernel: usize = sec.required("kernel")?;
            LayerSpec::MaxPool {
                kernel,
                stride: sec.parsed_or("stride", kernel)?,
            }
        }
        "flatten" => {
            sec.only(&["type"])?;
            LayerSpec::Flatten
        }
        "fully_connected" => {
            sec.only(&["type", "inputs", "outputs"])?;
            LayerSpec::Linear {
                inputs: sec.required("inputs")?,
                outputs: sec.required("outputs")?,
            }
        }
        "softmax_cross_entropy" => {
            sec.only(&["type"])?;
            LayerSpec::SoftmaxCrossEntropy
        }
        other => {
            return Err(Error::config(
                "type",
                format!("unknown layer type {other:?} at line {}", kind.line),
            ))
        }
    })
}

fn train_config(sec: &Section) -> Result<TrainConfig> {
    sec.only(&[
        "optimizer", "lr", "momentum", "weight_decay", "beta1", "beta2", "eps", "batch_size", "epochs", "seed",
        "lr_decay", "lr_interval", "eval_batch",
    ])?;
    let d = TrainConfig::default();
    let lr: f32 = sec.parsed_or("lr", d.optimizer.lr())?;
    let weight_decay = sec.parsed_or("weight_decay", 0.0)?;
    let optimizer = match sec.get("optimizer").map(|e| e.value.as_str()).unwrap_or("sgd") {
        "sgd" => {
            for key in ["beta1", "beta2", "eps"] {
                if sec.get(key).is_some() {
                    return Err(Error::config(key, "only used by adam"));
                }
            }
            OptimizerConfig::SgdMomentum {
                lr,
                momentum: sec.parsed_or("momentum", 0.9)?,
                weight_decay,
            }
        }
        "adam" => {
            if sec.get("momentum").is_some() {
                return Err(Error::config("momentum", "only used by sgd"));
            }
            OptimizerConfig::Adam {
                lr,
                beta1: sec.parsed_or("beta1", 0.9)?,
                beta2: sec.parsed_or("beta2", 0.999)?,
                eps: sec.parsed_or("eps", 1e-8)?,
                weight_decay,
            }
        }
        other => return Err(Error::config("optimizer", format!("unknown optimizer {other:?}"))),
    };
    let cfg = TrainConfig {
        optimizer,
        batch_size: sec.parsed_or("batch_size", d.batch_size)?,
        epochs: sec.parsed_or("epochs", d.epochs)?,
        seed: sec.parsed_or("seed", d.seed)?,
        schedule: StepDecay {
            factor: sec.parsed_or("lr_decay", d.schedule.factor)?,
            interval: sec.parsed_or("lr_interval", d.schedule.interval)?,
        },
        eval_batch: sec.parsed_or("eval_batch", d.eval_batch)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let sections = ini::parse(text)?;
    let mut name = None;
    let mut input = None;
    let mut defaults = SlbfDefaults::default();
    let mut layers = Vec::new();
    let mut train = None;
    for sec in &sections {
        match sec.name.as_str() {
            "model" => {
                sec.only(&["name", "input"])?;
                name = sec.get("name").map(|e| e.value.clone());
                input = Some(parse_input(sec)?);
            }
            "slbf" => {
                sec.only(&["f1", "f2", "scaling"])?;
                defaults = SlbfDefaults {
                    f1: sec.parsed("f1")?,
                    f2: sec.parsed("f2")?,
                    scaling: sec.parsed_or("scaling", true)?,
                };
            }
            "layer" => layers.push(sec),
            "train" => train = Some(train_config(sec)?),
            "" => {
                let key = sec.entries.first().map_or("", |e| e.key.as_str());
                return Err(Error::config(key, "key outside any section"));
            }
            other => return Err(Error::config(other, format!("unknown section at line {}", sec.line))),
        }
    }
    let network = NetworkSpec {
        input: input.ok_or_else(|| Error::config("input", "[model] section with input is required"))?,
        layers: layers
            .into_iter()
            .map(|sec| layer(sec, &defaults))
            .collect::<Result<Vec<_>>>()?,
    };
    if network.layers.is_empty() {
        return Err(Error::config("layer", "no [layer] sections"));
    }
    network.shapes().map_err(|e| Error::config("layer", e.to_string()))?;
    Ok(ExperimentConfig {
        name,
        network,
        train: train.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "
[model]
input = 4x6x6
[slbf]
f1 = 1/2
f2 = 1/2
[layer]
type = slbf_conv
c_in = 4
c_out = 8
kernel = 3
[layer]
type = flatten
[layer]
type = fully_connected
inputs = 128
outputs = 2
";

    #[test]
    fn parses_small_network() {
        let cfg = parse_config(SMALL).unwrap();
        assert_eq!(cfg.network.input, [4, 6, 6]);
        assert_eq!(cfg.slbf_table(), vec![(0, 2, 4, 2)]);
        let LayerSpec::SlbfConv(l) = &cfg.network.layers[0] else { panic!() };
        assert_eq!(l.f1, Fraction::new(1, 2).unwrap());
        assert!(l.scaling);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn missing_f2_names_f2() {
        let text = SMALL.replace("f2 = 1/2\n", "");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "f2"), "{err}");
    }

    #[test]
    fn decimal_fraction_rejected() {
        let text = SMALL.replace("f1 = 1/2", "f1 = 0.5");
        assert!(matches!(parse_config(&text), Err(Error::Config { ref key, .. }) if key == "f1"));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{SMALL}[train]\nlearning_rate = 0.1\n");
        assert!(matches!(parse_config(&text), Err(Error::Config { ref key, .. }) if key == "learning_rate"));
    }

    #[test]
    fn non_integral_m_names_f2() {
        let text = SMALL.replace("f2 = 1/2", "f2 = 1/3");
        assert!(matches!(parse_config(&text), Err(Error::Config { ref key, .. }) if key == "f2"));
    }

    #[test]
    fn adam_section() {
        let text = format!("{SMALL}[train]\noptimizer = adam\nlr = 0.001\nepochs = 3\n");
        let cfg = parse_config(&text).unwrap();
        assert!(matches!(cfg.train.optimizer, OptimizerConfig::Adam { .. }));
        assert_eq!(cfg.train.epochs, 3);
    }
}
