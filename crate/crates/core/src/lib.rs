//! Expert-guided logit regularization for domain generalization, at desk scale.
//!
//! The crate trains one expert per source domain alongside a target model
//! whose logits are regressed onto the experts' probabilities, and ships the
//! baselines, ablations and analysis tools needed to study that coupling on
//! synthetic multi-domain data.

pub mod analysis;
pub mod autodiff;
pub mod domains;
pub mod error;
pub mod models;
pub mod train;

pub use error::{Error, Result};
