//! Quantized-CNN toolkit: duplicated-weight and duplicated-feature-map
//! convolution layers with correct forward/backward semantics, bit-packed
//! low-precision inference kernels, a desk-scale quantization-aware trainer,
//! and an inference-cost analyzer.

pub mod bitpack;
pub mod config;
pub mod cost;
pub mod image_io;
pub mod layers;
pub mod model;
pub mod presets;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use layers::{DupMode, Reduce};
pub use quant::{QTensor, QuantSpec, QWeights};
pub use tensor::{ShapeError, Tensor};
