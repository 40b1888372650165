//! CPU engine for binary segmentation of stained-tissue images.
//!
//! The crate trains and runs small UNet-style networks whose distinguishing
//! piece is a series of dilated residual convolutions that widens the
//! receptive field without extra downsampling. Everything runs on the CPU
//! with deterministic, seeded arithmetic: same inputs, same seeds, same bits
//! out.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod dice;
pub mod error;
pub mod exec;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod patch;
pub mod stitch;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
