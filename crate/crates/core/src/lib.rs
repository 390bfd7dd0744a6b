//! Discrete-token speech enhancement on a synthetic corpus: signal synthesis
//! and features, k-means tokenization, token sequence transforms, CTC,
//! a small differentiable network runtime, enhancer training and scoring.

pub mod ctc;
pub mod enhance;
pub mod error;
pub mod metrics;
pub mod nnet;
pub mod signal;
pub mod tokenizer;
pub mod tokenseq;

pub use error::{Error, Result};
