//! Pruning-footprint revival attacks on pruning-based unlearning, the
//! Gaussian obfuscation defense, and synthetic benchmarks for both.

pub mod completion;
pub mod defense;
pub mod error;
pub mod report;
pub mod revival;
pub mod synthbench;
pub mod tensor;

pub use error::{Error, Result};
