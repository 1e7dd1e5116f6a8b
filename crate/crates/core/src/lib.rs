//! Spatiotemporal encoder-decoder transformer for binary classification of
//! ROI time series, with CNN-based ROI embedding, local temporal window
//! attention and ROI-rank masking.
//!
//! The crate is self-contained: [`autodiff`] provides the dense tensors and
//! reverse-mode gradients everything else is built on.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, Var};
pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
