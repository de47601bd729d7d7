//! Multi-feature concatenation and multi-classifier stacking for multi-site
//! tabular classification, with ComBat site harmonization, Shapley
//! explanation of the meta model, and a multi-site evaluation harness.

pub mod classifiers;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gbt;
pub mod harmonize;
mod linalg;
pub mod model;
pub mod stacking;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
