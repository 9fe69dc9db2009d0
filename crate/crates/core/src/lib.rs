//! Missingness-aware order-agnostic autoregressive models for tabular data.

pub mod acquisition;
pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod tabular;

pub use error::{Error, Result};
