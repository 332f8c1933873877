#![no_std]
//! Core algorithms for training emotion-recognition representations that hide
//! demographic and speaker-membership information, and for measuring how much
//! they leak.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attack;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod math;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{finite_diff_check, Activation, Graph, OpKind, Value};
pub use tensor::Tensor;
