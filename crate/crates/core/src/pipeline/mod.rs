//! Corpus packing, training loops and checkpoint files.

mod checkpoint;
mod finetune;
mod pack;
mod pretrain;

pub use checkpoint::{
    Checkpoint, CheckpointError, LossSample, TaskMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use finetune::{
    finetune, register_prompt_tokens, ClsItem, FinetuneConfig, FinetuneData, FinetuneOutcome,
    GenItem, McqItem,
};
pub use pack::pack_corpus;
pub use pretrain::{pretrain, pretrain_until, PretrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::optimizer::OptimizerError;
use crate::transformer::TransformerError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// State before the failed step.
        last_good: Box<Checkpoint<f32>>,
    },
    #[error(transparent)]
    Model(#[from] TransformerError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Seed for a named subsystem, derived from the run seed.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Numeric formats used for each part of training, recorded as metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub compute: String,
    pub parameter_storage: String,
    pub optimizer_storage: String,
    pub gradient_communication: String,
}

impl PrecisionPolicy {
    /// bf16 compute with fp32 parameters, optimizer state and gradient traffic.
    pub fn bf16_mixed() -> Self {
        Self {
            compute: "bf16".into(),
            parameter_storage: "fp32".into(),
            optimizer_storage: "fp32".into(),
            gradient_communication: "fp32".into(),
        }
    }

    /// Everything in the given precision; what desk-scale runs actually do.
    pub fn full(label: &str) -> Self {
        Self {
            compute: label.into(),
            parameter_storage: label.into(),
            optimizer_storage: label.into(),
            gradient_communication: label.into(),
        }
    }
}
