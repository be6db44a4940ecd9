//! DenseSteer core library.
//!
//! Builds dense/sparse contrastive reasoning pairs from a model's own
//! outputs, extracts mean-difference steering vectors from residual-stream
//! states, injects them during greedy decoding, and evaluates the effect on
//! reasoning density, token-level NLL and task accuracy. Ships with a
//! deterministic micro-transformer so the whole pipeline runs end to end on
//! one core.

pub mod error;
pub mod eval;
pub mod model;
pub mod pairgen;
pub mod parallel;
pub mod prompts;
pub mod scoring;
pub mod steering;
pub mod sweep;
pub mod tokenizer;
pub mod trace;

pub use error::{CoreError, Result};
