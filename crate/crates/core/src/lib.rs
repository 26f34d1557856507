//! Character-level sequence-to-sequence speech recognition with deep
//! Transformers and stochastic residual layers.

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
