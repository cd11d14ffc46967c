//! Sparse autoencoders built around an unrolled matching-pursuit encoder,
//! with ReLU, TopK, BatchTopK and Matryoshka baselines, a synthetic
//! hierarchical-concept benchmark, and coherence / rank / modality metrics.

pub mod analysis;
pub mod cli;
pub mod dictionary;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
