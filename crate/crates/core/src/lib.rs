//! Replay-based continual learning with learnable soft labels.
//!
//! The crate trains a small MLP classifier on a sequence of class-disjoint
//! tasks while a reservoir-sampled memory buffer replays old examples. A
//! hypernetwork (the DDN) produces soft labels for replayed examples and is
//! meta-trained through a one-step unrolled inner update so that buffer
//! gradients track the gradients of the data they summarize.

pub mod buffer;
pub mod checkpoint;
pub mod datasets;
pub mod experiment;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod strategies;
pub mod tensor_core;
pub mod trainer;

pub use error::{Error, Result};
