//! Allocation-only core of the post-training lab: a reverse-mode autodiff
//! tape, a byte-level causal transformer, the SFT / DPO / reward-model
//! objectives, the optimizer and learning-rate schedule, and the synthetic
//! evaluation tasks. File IO, the CLI, dataset auditing and sweeps live in
//! the `posttrain` crate.

#![no_std]

extern crate alloc;

pub mod container;
pub mod data;
pub mod dpo;
pub mod float;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod rm;
pub mod sft;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use graph::{Graph, Var};
pub use model::{ModelCheckpoint, ModelConfig, Role};
pub use tensor::{Tensor, TensorError};
pub use tokenizer::TokenSeq;
