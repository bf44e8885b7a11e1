//! Layer primitives: convolution, activations, channel rearrangements,
//! normalisation and resampling.

mod activation;
mod channel;
mod conv;
mod norm;
mod resize;

pub use activation::sigmoid_scalar;
pub use channel::shuffle_source;
pub use conv::{conv2d_forward, ConvGeometry, ConvParams};
pub use resize::{bicubic_downsample, bicubic_resize, bicubic_upsample, cubic};
