//! Explainable channel loss (ECLoss).
//!
//! Activation templates, the template/feature-map mutual-information loss and
//! its gradient, a small deterministic CNN trainer, a synthetic part-based
//! dataset, and the part-explainability, location-consistency and
//! activation-robustness metrics.

pub mod ecloss;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod templates;
pub mod tensor;
mod textio;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{FeatureBatch, Tensor};
