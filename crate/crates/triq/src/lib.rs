//! Transformer-based image quality assessment.
//!
//! Pipeline: a stride-32 convolutional backbone (or an imported feature
//! map) feeds an adaptive tokenizer, a shallow Transformer encoder, and a
//! five-grade quality-distribution head. Training, evaluation metrics,
//! data preparation, and attention visualization live alongside.

pub mod attnviz;
pub mod backbone;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seeds;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
