//! Convolutional networks whose filters are stacked from a shared bank of
//! low-dimensional binary filters.

pub mod analyzer;
pub mod bits;
pub mod data;
pub mod error;
pub mod exec;
pub mod fraction;
pub mod ini;
pub mod model_io;
pub mod nn;
pub mod slbf;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fraction::Fraction;
pub use tensor::{ConvGeometry, Tensor4};
