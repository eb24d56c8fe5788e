#![doc = include_str!("../README.md")]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batching;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use rng::Rng;
pub use tensor::Tensor;
