//! Schema-graph prompt learning for multi-domain dialogue state
//! tracking, from scratch: a trainable graph encoder over the dialogue
//! schema produces prompt vectors that condition a frozen seq2seq
//! backbone to fill masked slot values.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod prompt;
#[cfg(test)]
pub(crate) mod test_support;
pub mod trainer;

pub use error::{Error, Result};
