//! Experiment harness: synthetic data, teacher training, logit caching,
//! distillation runs in every mode, gradient audits, GSNR summaries and k
//! search.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ksearch;
pub mod train;

pub use error::{Error, Result};
