//! Ranking-model building blocks: semantic-ID tokenization of item
//! embeddings, orthogonally rotated static-feature blocks, and block-sparse
//! attention over the resulting token sequence.

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rotation;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
