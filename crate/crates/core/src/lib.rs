//! Core of a desk-scale workbench for fine-tuning a small diffusion
//! transformer from a "source" distribution onto multi-object "driving"
//! scenes.
//!
//! Everything here is pure computation over `alloc`; file formats, the CLI
//! and other IO live in the companion `ditune` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sample;
pub mod scalar;
pub mod scene;
pub mod schedule;
pub mod ssei;
pub mod tensor;

pub use autodiff::{Graph, RotationTable, Var};
pub use error::{Error, Result};
pub use model::{DiT, DiTConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
