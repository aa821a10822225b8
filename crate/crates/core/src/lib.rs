//! Attribute prediction from face images with small convolutional networks,
//! deconvnet feature visualization and significance testing against chance
//! and human raters.

pub mod checkpoint;
pub mod data;
pub mod deconv;
pub mod error;
pub mod eval;
pub mod nn;
pub mod seeding;
pub mod stats;
pub mod svm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
