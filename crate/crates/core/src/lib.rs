//! Multimodal prompt learning for few-shot product title generation.

pub mod cycle_align;
pub mod data_synth;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod prompts;
pub mod storage;
pub mod training;

pub use error::{Error, Result};
