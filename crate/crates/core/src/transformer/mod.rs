//! GPT-2 style decoder with learned absolute positions, a tied
//! language-model head and optional option-scoring / classification heads.
//!
//! Each block is pre-norm: `x + attn(ln_1(x))`, then `x + mlp(ln_2(x))`,
//! with a final `ln_f` before the output projection.

mod config;
mod forward;
mod params;
mod tasks;

pub use config::{count_params, ModelConfig};
pub use forward::{Batch, Bound};
pub use params::{expected_shapes, init_params, Block, HeadSpec, Parameters, TaskHead, INIT_STD};
pub use tasks::{
    argmax, classification_sequence, option_sequences, DecodeStrategy, PromptTokens,
    ANSWER_TOKEN, CONTEXT_TOKEN, QUESTION_TOKEN,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}
