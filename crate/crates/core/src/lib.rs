//! Frequency-attention and multi-view sliced-Wasserstein knowledge distillation
//! for compressed-image classification, with a small reverse-mode trainer.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod freq;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod spectral;
pub mod suites;
pub mod swd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureTensor, Tensor};
