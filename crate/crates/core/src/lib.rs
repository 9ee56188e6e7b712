//! Online adaptive video object segmentation at desk scale.
//!
//! The crate contains a small reverse-mode differentiation engine, a compact
//! fully-convolutional two-class segmentation network, the bootstrapped
//! cross-entropy loss with Adam, binary mask geometry, the online adaptation
//! loop, a synthetic video benchmark and segmentation metrics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod loss;
pub mod maskops;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod posteriors;
pub mod rng;
pub mod segnet;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
