//! Inference provenance graphs for small dense classifiers: extraction,
//! empirical and structural characterization across input settings, and
//! inference-time activation repair.

pub mod attacks;
pub mod config;
pub mod data;
pub mod empirical;
pub mod evaluation;
pub mod error;
pub mod ipg;
pub mod nn;
pub mod pipeline;
pub mod repair;
pub mod structural;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
