//! Request-centric ranking transformer: synthetic request logs, tokenization,
//! structured sparse attention with query pruning, MoE feed-forward layers,
//! multi-objective heads, generative pre-training and the training loops.

pub mod attention;
pub mod data;
pub mod error;
pub mod model;
pub mod moe;
pub mod params;
pub mod plots;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
