use rand::Rng;

use super::kernel::{self, slbf_backward, slbf_forward};
use super::{binarize_bank, project_selector, BinaryFilterBank, SelectorMatrix, SlbfLayerConfig, SlbfShape};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor4;

/// Full-precision shadows of the bank (`r`, laid out `(m, s, d, d)`) and of the
/// selectors (`q`, one row-major `m x k` block per output filter).
#[derive(Clone, Debug)]
pub struct ProxyPair {
    pub r: Param,
    pub q: Param,
}

impl ProxyPair {
    /// `R ~ U(-b, b)` with `b = sqrt(6 / (s d^2))`, `Q ~ U(-1, 1)`.
    pub fn init<R: Rng>(shape: &SlbfShape, rng: &mut R) -> Self {
        let fan_in = shape.filter_len() as f32;
        let bound = (6.0 / fan_in).sqrt();
        let r = (0..shape.m * shape.filter_len())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let q = (0..shape.geometry.out_channels * shape.m * shape.k())
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        Self {
            r: Param::new(r),
            q: Param::new(q),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.r.value.iter().chain(&self.q.value).all(|v| v.is_finite())
    }
}

struct Cache {
    input: Tensor4,
    maps: Vec<f32>,
}

/// An SLBF convolution layer.
///
/// With proxies attached the layer is trainable: every forward re-derives the
/// bank and selectors from them. Without proxies it is an inference layer and
/// its bank and selectors are fixed.
pub struct SlbfConv {
    config: SlbfLayerConfig,
    shape: SlbfShape,
    bank: BinaryFilterBank,
    bank_values: Vec<f32>,
    selectors: Vec<SelectorMatrix>,
    proxies: Option<ProxyPair>,
    cache: Option<Cache>,
    bank_convolutions: usize,
}

impl SlbfConv {
    pub fn new_trainable<R: Rng>(config: SlbfLayerConfig, rng: &mut R) -> Result<Self> {
        let shape = config.shape()?;
        let proxies = ProxyPair::init(&shape, rng);
        Self::with_proxies(config, proxies)
    }

    pub fn with_proxies(config: SlbfLayerConfig, proxies: ProxyPair) -> Result<Self> {
        let shape = config.shape()?;
        if proxies.r.value.len() != shape.m * shape.filter_len()
            || proxies.q.value.len() != shape.geometry.out_channels * shape.m * shape.k()
        {
            return Err(Error::dim("proxy sizes do not match the layer shape"));
        }
        let mut layer = Self {
            config,
            shape,
            bank: BinaryFilterBank::from_values(shape.m, shape.s, shape.geometry.kernel, &proxies.r.value)?,
            bank_values: Vec::new(),
            selectors: Vec::new(),
            proxies: Some(proxies),
            cache: None,
            bank_convolutions: 0,
        };
        layer.realize()?;
        Ok(layer)
    }

    /// Inference layer from a realized bank and selectors.
    pub fn from_parts(
        config: SlbfLayerConfig,
        bank: BinaryFilterBank,
        selectors: Vec<SelectorMatrix>,
    ) -> Result<Self> {
        let shape = config.shape()?;
        if (bank.m(), bank.s(), bank.d()) != (shape.m, shape.s, shape.geometry.kernel) {
            return Err(Error::dim(format!(
                "bank m={} s={} d={} does not fit layer m={} s={} d={}",
                bank.m(),
                bank.s(),
                bank.d(),
                shape.m,
                shape.s,
                shape.geometry.kernel
            )));
        }
        if selectors.len() != shape.geometry.out_channels {
            return Err(Error::dim("one selector per output filter required"));
        }
        for sel in &selectors {
            if sel.k() != shape.k() || sel.m() != shape.m {
                return Err(Error::CorruptSelector(format!(
                    "selector of filter {} is not {}x{}",
                    sel.owner(),
                    shape.m,
                    shape.k()
                )));
            }
            if !config.scaling && sel.values().iter().any(|&v| v != 1.0) {
                return Err(Error::CorruptSelector(
                    "selector values must be 1 without scaling factors".into(),
                ));
            }
        }
        Ok(Self {
            config,
            shape,
            bank_values: bank.to_values(),
            bank,
            selectors,
            proxies: None,
            cache: None,
            bank_convolutions: 0,
        })
    }

    /// Re-derives the bank (`sign(R)`) and selectors (max-`|Q|` projection)
    /// from the proxies. No-op for inference layers.
    pub fn realize(&mut self) -> Result<()> {
        if self.proxies.is_none() {
            return Ok(());
        }
        let (bank, selectors) = self.realized()?;
        self.bank_values = bank.to_values();
        self.bank = bank;
        self.selectors = selectors;
        Ok(())
    }

    fn realized(&self) -> Result<(BinaryFilterBank, Vec<SelectorMatrix>)> {
        let p = self
            .proxies
            .as_ref()
            .ok_or_else(|| Error::Usage("layer has no proxies".into()))?;
        let s = &self.shape;
        let bank = binarize_bank(&p.r.value, s.m, s.s, s.geometry.kernel)?;
        if let Some(pos) = p.q.value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "selector proxy entry {pos} is {}",
                p.q.value[pos]
            )));
        }
        let selectors = p
            .q
            .value
            .chunks(s.m * s.k())
            .enumerate()
            .map(|(t, q)| project_selector(q, s.m, s.k(), t, self.config.scaling))
            .collect();
        Ok((bank, selectors))
    }

    /// Training forward: realizes the bank and selectors from the current
    /// proxies and caches what backward needs.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<Tensor4> {
        self.realize()?;
        let out = slbf_forward(x, &self.bank_values, &self.selectors, &self.shape)?;
        self.bank_convolutions = out.bank_convolutions;
        self.cache = Some(Cache {
            input: x.clone(),
            maps: out.maps,
        });
        Ok(out.output)
    }

    /// Inference forward. A trainable layer realizes its bank and selectors
    /// from the current proxies on the fly without storing them.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        match &self.proxies {
            None => Ok(slbf_forward(x, &self.bank_values, &self.selectors, &self.shape)?.output),
            Some(_) => {
                let (bank, selectors) = self.realized()?;
                Ok(slbf_forward(x, &bank.to_values(), &selectors, &self.shape)?.output)
            }
        }
    }

    /// Fills the proxy gradients and returns the gradient for the input.
    pub fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("SLBF backward called without a cached forward pass".into()))?;
        let grads = slbf_backward(
            grad_out,
            &cache.input,
            &self.bank_values,
            &self.selectors,
            &self.shape,
            &cache.maps,
        )?;
        if let Some(p) = &mut self.proxies {
            p.r.grad = kernel::ste_bank_grad(&grads.grad_bank, &p.r.value);
            p.q.grad = kernel::ste_selector_grad(&grads.grad_selector, &self.selectors, self.shape.m);
        }
        Ok(grads.grad_x)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.proxies {
            Some(p) => vec![&mut p.r, &mut p.q],
            None => Vec::new(),
        }
    }

    /// Realizes from the proxies one last time and drops them.
    pub fn freeze(&mut self) -> Result<()> {
        self.realize()?;
        self.proxies = None;
        self.cache = None;
        Ok(())
    }

    pub fn config(&self) -> &SlbfLayerConfig {
        &self.config
    }
    pub fn shape(&self) -> &SlbfShape {
        &self.shape
    }
    pub fn bank(&self) -> &BinaryFilterBank {
        &self.bank
    }
    pub fn selectors(&self) -> &[SelectorMatrix] {
        &self.selectors
    }
    pub fn proxies(&self) -> Option<&ProxyPair> {
        self.proxies.as_ref()
    }
    pub fn proxies_mut(&mut self) -> Option<&mut ProxyPair> {
        self.proxies.as_mut()
    }
    /// Bank convolutions performed by the most recent forward pass.
    pub fn last_bank_convolutions(&self) -> usize {
        self.bank_convolutions
    }
}

impl Clone for SlbfConv {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            shape: self.shape,
            bank: self.bank.clone(),
            bank_values: self.bank_values.clone(),
            selectors: self.selectors.clone(),
            proxies: self.proxies.clone(),
            cache: None,
            bank_convolutions: 0,
        }
    }
}

impl std::fmt::Debug for SlbfConv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlbfConv")
            .field("config", &self.config)
            .field("trainable", &self.proxies.is_some())
            .finish()
    }
}
