//! Binary (1-bit) MobileNet-style networks on the CPU.
//!
//! Weights and activations of every intermediate convolution are packed
//! to one bit and multiplied with xnor-popcount. The first and last layers
//! stay in `f32`. Blocks carry identity skips around each binary conv so
//! that real-valued information survives the sign function.

pub mod binarize;
pub mod blocks;
pub mod config;
pub mod conv;
pub mod error;
pub mod layers;
pub mod model_io;
pub mod network;
pub mod param;
pub mod perf;
pub mod svg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
