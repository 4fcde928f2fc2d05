//! Multi-label text classification with a class-wise cross-attention
//! decoder, robustness training regimes, token-level feature attribution
//! and plausibility/faithfulness evaluation.

pub mod attribution;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
