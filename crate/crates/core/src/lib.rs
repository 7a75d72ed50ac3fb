//! Convolutional networks with sparse channel-to-channel connectivity.

pub mod connectivity;
pub mod convnet;
pub mod equivalence;
pub mod error;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
