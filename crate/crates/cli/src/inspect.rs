use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use medlm_core::tokenizer::{TokenizerModel, FORMAT_VERSION};
use medlm_core::transformer::count_params;
use serde_json::json;

use crate::run::{emit, to_json, usage};
use crate::train::load_checkpoint;

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, conflicts_with = "tokenizer")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

pub fn run(a: InspectArgs) -> Result<()> {
    let value = match (&a.checkpoint, &a.tokenizer) {
        (Some(path), None) => {
            let ckpt = load_checkpoint(path)?;
            let p = &ckpt.params;
            let tensors: Vec<_> = p
                .named()
                .into_iter()
                .map(|(name, t)| json!({ "name": name, "shape": t.shape() }))
                .collect();
            json!({
                "config": p.config,
                "head": p.head_spec(),
                "parameter_count": p.num_elements(),
                "backbone_parameter_count": count_params(&p.config),
                "step": ckpt.step,
                "precision": ckpt.precision,
                "tokenizer_hash": ckpt.tokenizer_hash,
                "task": ckpt.task,
                "has_optimizer_state": ckpt.optimizer.is_some(),
                "loss_curve": ckpt.loss_curve,
                "content_hash": ckpt.content_hash(),
                "tensors": tensors,
            })
        }
        (None, Some(path)) => {
            let tok = TokenizerModel::load(path)?;
            let specials: Vec<_> = tok
                .special_ids()
                .iter()
                .map(|&id| json!({ "id": id, "text": tok.token_text(id) }))
                .collect();
            json!({
                "format_version": FORMAT_VERSION,
                "vocab_size": tok.vocab_size(),
                "merges": tok.num_merges(),
                "specials": specials,
                "config": tok.config(),
                "content_hash": tok.content_hash(),
            })
        }
        _ => return Err(usage("give exactly one of --checkpoint or --tokenizer")),
    };
    emit(None, &to_json(&value)?)
}
