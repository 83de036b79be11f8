//! Core library for the perceptual-initialization pipeline: a small tensor
//! stack with reverse-mode autodiff, paired image/text encoders, training
//! objectives, deterministic synthetic data, optimization loops, evaluation,
//! and scaling-law fits.

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod rng;
pub mod scaling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
