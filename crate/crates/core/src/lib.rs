//! Desk-scale workbench for compressing a transformer's KV cache by evicting
//! structured slices and reconstructing them with small linear predictors.
//!
//! * [`kernel`]: matrices, causal GQA attention and its backward pass, RoPE,
//!   losses, AdamW.
//! * [`model`]: a frozen random GQA transformer that produces caches.
//! * [`echo`]: grouping, eviction, feature assembly, prediction, byte
//!   accounting, mode switching and checkpoints.
//! * [`trainer`]: two-stage predictor training.
//! * [`hybrid`]: key-channel pruning combined with value reconstruction.
//! * [`harness`]: run configs, evaluation, benchmarks and the needle task.

pub mod corpus;
pub mod echo;
mod error;
pub mod harness;
pub mod hybrid;
pub mod kernel;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
