//! famseg: a desk-scale, from-scratch implementation of the FAMSeg
//! segmentation network: a multi-branch strip-convolution encoder with
//! Mamba-filtered residual shortcuts, a feature-aware reassembly decoder,
//! and an AdamW/SGD alternating training scheme, built on a minimal f64
//! autodiff engine that is verified end to end by finite differences.
//!
//! The crate ships a synthetic ultrasound-phantom generator so every
//! experiment (training, evaluation, ablations) runs self-contained on a
//! laptop CPU. See the `examples/` directory for one runnable program per
//! capability and `src/bin/famseg.rs` for the command-line front end.

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod mamba;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{FamError, Result};
