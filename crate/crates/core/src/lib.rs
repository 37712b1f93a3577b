//! Toy-scale task-vector laboratory.
//!
//! A small decoder-only transformer with a hookable residual stream is
//! meta-trained on synthetic single-token tasks. The forward pass is split at
//! a chosen layer: the hidden state of the final `→` token (computed on the
//! demonstrations plus a dummy query) acts as a task vector, and it is patched
//! into a demonstration-free run on the real query.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line front end live in the companion `tvlab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod error;
pub mod hypothesis;
mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ForwardTrace, HookedModel, ModelConfig, PatchSpec, TransformerModel};
pub use tape::{GradTape, Var};
pub use tasks::{Episode, TaskSpec, Token, Vocab};
pub use tensor::Tensor;
