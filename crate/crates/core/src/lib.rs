//! Lightweight single-image super-resolution with a feature distillation
//! interaction weighted network, built on a small tape-based autodiff engine.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod blocks;
pub mod config;
pub mod error;
pub mod image_io;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ModelParams, ParamBuilder, ParamId};
pub use tensor::{Real, Shape, Tensor};
