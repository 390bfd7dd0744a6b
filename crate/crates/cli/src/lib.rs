//! Pipeline orchestration for the token enhancement experiments: corpus
//! synthesis, tokenization, BPE, model training, evaluation and reporting.

pub mod config;
pub mod corpus;
pub mod manifest;
pub mod pipeline;
pub mod report;
