//! Desk-scale probabilistic time-series forecasting built on Legendre memory.
//!
//! The pipeline: a window is instance-normalized, cut into patches, embedded,
//! and fused with fixed Legendre encodings of period-aligned context windows;
//! a self-attention encoder and a selective state-space decoder produce one
//! conditioning vector per future patch; a masked-coupling normalizing flow
//! turns each conditioning vector into an exact patch likelihood and a
//! sampler for probabilistic forecasts.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod flow;
pub mod legendre;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{FlameError, Result};
pub use tensor::Tensor;
