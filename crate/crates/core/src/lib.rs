//! Hybrid near/far-field channel estimation for array-of-subarrays THz
//! receivers with a fixed-point iteration of a linear estimator and a
//! dual-attention learned denoiser.

pub mod baselines;
pub mod channel;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod measurement;
pub mod nle;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
