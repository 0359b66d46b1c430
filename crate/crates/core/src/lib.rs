//! Quantization laboratory: fake quantization, range calibration, error
//! decomposition and outlier-suppressing fine-tuning on a toy transformer.

pub mod analysis;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod io;
pub mod kernels;
pub mod model;
pub mod outlier;
pub mod pipeline;
pub mod quant;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{QtError, Result};
pub use quant::QuantSpec;
pub use tensor::Tensor;
