//! Blind image watermarking with learned encoder/decoder networks and
//! differentiable attack layers.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod jpeg;
pub mod message;
pub mod networks;
pub mod nn;
pub mod noise;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use noise::{NoiseKind, NoiseSpec};
pub use tensor::ImageBatch;
