//! Command-line pipeline: synthetic data, preprocessing, cross-validated
//! training, evaluation, significance tests and feature visualization.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
