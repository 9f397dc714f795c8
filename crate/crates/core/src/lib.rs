//! A desk-scale causal transformer language model built from scratch:
//! next-token pretraining, preference alignment (DPO, best-of-N rejection
//! sampling, verifiable-reward policy gradient), and KV-cached sampling.

pub mod align;
pub mod cli;
pub mod error;
pub mod eval;
pub mod generate;
pub mod model;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
