//! Decoder-decoder context compression at desk scale.
//!
//! A small causal decoder reads a context followed by `N` memory tokens; the
//! hidden states at those positions are projected into the embedding space of
//! a larger decoder, which then answers queries against the compressed
//! context instead of the full token sequence.

pub mod compression;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod kv;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Float, Tape, Tensor, Var};
