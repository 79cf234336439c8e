//! Early-exit convolutional networks: a small reverse-mode tensor engine,
//! residual backbones with confidence-gated exit blocks, cost accounting,
//! exit placement, cost-aware training and early-terminating inference.

pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod inference;
pub mod placement;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
