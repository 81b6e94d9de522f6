//! Convolution layers whose filters are stacked from a shared bank of
//! low-dimensional binary filters.
//!
//! A layer with `c_in` inputs and `c_out` outputs owns
//!
//! - a bank of `m = c_out * f2` binary filters, each `s x d x d` with
//!   `s = c_in * f1`, and
//! - one selector per output filter choosing, for each of the `k = c_in / s`
//!   channel blocks, which bank filter fills it and with what scale.
//!
//! Training keeps full-precision proxies (`R` for the bank, `Q` for the
//! selectors). Each forward pass re-derives the bank as `sign(R)` and each
//! selector column as the max-`|Q|` entry; gradients reach the proxies through
//! straight-through estimates (see [`kernel::ste_bank_grad`] and
//! [`kernel::ste_selector_grad`]).

mod bank;
pub mod kernel;
mod layer;
mod selector;

pub use bank::{binarize_bank, BinaryFilterBank};
pub use kernel::{slbf_backward, slbf_forward, SlbfForward, SlbfGrads};
pub use layer::{ProxyPair, SlbfConv};
pub use selector::{materialize_weights, project_selector, stacked_filter, SelectorMatrix};

use crate::error::{Error, Result};
use crate::fraction::Fraction;
use crate::tensor::ConvGeometry;

/// Compression fractions and geometry of one SLBF layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlbfLayerConfig {
    pub f1: Fraction,
    pub f2: Fraction,
    pub scaling: bool,
    pub geometry: ConvGeometry,
}

impl SlbfLayerConfig {
    pub fn new(geometry: ConvGeometry, f1: Fraction, f2: Fraction, scaling: bool) -> Self {
        Self {
            f1,
            f2,
            scaling,
            geometry,
        }
    }

    /// Depth of a bank filter, `c_in * f1`.
    pub fn s(&self) -> Result<usize> {
        match self.f1.scale(self.geometry.in_channels) {
            Some(s) if s >= 1 && s <= self.geometry.in_channels && self.geometry.in_channels % s == 0 => Ok(s),
            _ => Err(Error::config(
                "f1",
                format!(
                    "c_in * f1 = {} * {} is not a positive integer dividing c_in",
                    self.geometry.in_channels, self.f1
                ),
            )),
        }
    }

    /// Bank size, `c_out * f2`.
    pub fn m(&self) -> Result<usize> {
        match self.f2.scale(self.geometry.out_channels) {
            Some(m) if m >= 1 => Ok(m),
            _ => Err(Error::config(
                "f2",
                format!(
                    "c_out * f2 = {} * {} is not a positive integer",
                    self.geometry.out_channels, self.f2
                ),
            )),
        }
    }

    pub fn shape(&self) -> Result<SlbfShape> {
        SlbfShape::new(self.geometry, self.s()?, self.m()?)
    }
}

/// Resolved integer shape of an SLBF layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlbfShape {
    pub geometry: ConvGeometry,
    pub s: usize,
    pub m: usize,
}

impl SlbfShape {
    pub fn new(geometry: ConvGeometry, s: usize, m: usize) -> Result<Self> {
        geometry.validate()?;
        if s == 0 || geometry.in_channels % s != 0 {
            return Err(Error::config(
                "f1",
                format!("s = {s} does not divide c_in = {}", geometry.in_channels),
            ));
        }
        if m == 0 {
            return Err(Error::config("f2", "bank size m must be positive"));
        }
        Ok(Self { geometry, s, m })
    }

    /// Channel blocks per output filter, `c_in / s`.
    pub fn k(&self) -> usize {
        self.geometry.in_channels / self.s
    }

    /// Values per bank filter, `s * d * d`.
    pub fn filter_len(&self) -> usize {
        self.s * self.geometry.kernel * self.geometry.kernel
    }
}
