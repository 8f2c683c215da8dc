//! Lottery-ticket laboratory: a small CNN classifier trained with class-balanced
//! sampling, pruned iteratively by global weight magnitude with rewinding to the
//! dense initialization, and audited per class, per demographic subgroup, and
//! per pruning level.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod optimizer;
pub mod pruning;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
