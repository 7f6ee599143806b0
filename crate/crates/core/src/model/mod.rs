//! Encoders for image features and text, the prefix-conditioned decoder, and
//! title generation.

pub mod beam;
mod config;
pub mod network;
mod params;

pub use beam::{
    beam_search, generate, greedy_decode, length_normalized, DecoderScorer, GenerationHypothesis,
    NextTokenScorer,
};
pub use config::ModelConfig;
pub use network::{sinusoidal_positions, Forward, MemoryKv};
pub use params::ModelParams;
