use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use medlm_core::optimizer::AdamWConfig;
use medlm_core::pipeline::{
    child_seed, finetune as run_finetune, pack_corpus, pretrain as run_pretrain,
    register_prompt_tokens, Checkpoint, FinetuneConfig, FinetuneData, PipelineError,
    PretrainConfig,
};
use medlm_core::qa_harness::{
    cls_item, gen_item, load_dataset, mcq_item, Dataset, DatasetKind, YES_NO_MAYBE,
};
use medlm_core::tokenizer::{read_corpus, TokenizerModel, END_OF_TEXT};
use medlm_core::transformer::{init_params, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::run::{emit, load_config, require, to_json, Run};
use crate::Global;

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Corpus file or directory; one document per non-empty line
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Continue the schedule from this checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total optimizer steps of the schedule
    #[arg(long)]
    steps: Option<u64>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRun {
    pub model: ModelConfig,
    pub train: PretrainConfig,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: PretrainConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneTask {
    Mcq,
    Cls,
    Gen,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    task: FinetuneTask,
    /// JSONL training examples
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Classification label set, comma-separated
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Where classification runs write the tokenizer with prompt markers;
    /// defaults to `<out>.tokenizer.json`
    #[arg(long)]
    tokenizer_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRun {
    pub finetune: FinetuneConfig,
    pub optimizer: AdamWConfig,
    pub labels: Vec<String>,
    pub loss_masking: bool,
}

impl Default for FinetuneRun {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig::default(),
            optimizer: AdamWConfig::default(),
            labels: YES_NO_MAYBE.iter().map(|s| s.to_string()).collect(),
            loss_masking: true,
        }
    }
}

fn load_tokenizer(path: &Path) -> Result<TokenizerModel> {
    TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Fails when the checkpoint records a different tokenizer.
pub fn check_pairing(ckpt: &Checkpoint<f32>, tok: &TokenizerModel) -> Result<()> {
    match &ckpt.tokenizer_hash {
        Some(h) if *h != tok.content_hash() => {
            bail!("checkpoint was trained with tokenizer {h}, given {}", tok.content_hash())
        }
        _ => Ok(()),
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn final_loss(ckpt: &Checkpoint<f32>, losses: &[medlm_core::pipeline::LossSample]) -> Option<f64> {
    losses.last().or(ckpt.loss_curve.last()).map(|s| s.loss)
}

/// Saves the outcome, or the last good state when training diverged.
fn save_result(
    result: Result<(Checkpoint<f32>, Vec<medlm_core::pipeline::LossSample>), PipelineError>,
    out: &Path,
) -> Result<(Checkpoint<f32>, Vec<medlm_core::pipeline::LossSample>)> {
    match result {
        Ok((ckpt, losses)) => {
            ckpt.save(out).with_context(|| format!("writing {}", out.display()))?;
            Ok((ckpt, losses))
        }
        Err(PipelineError::Diverged {
            step,
            reason,
            last_good,
        }) => {
            last_good.save(out).with_context(|| format!("writing {}", out.display()))?;
            Err(anyhow!(
                "training diverged at step {step}: {reason}; state before that step written to {}",
                out.display()
            ))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn pretrain(a: PretrainArgs, g: &Global) -> Result<()> {
    let out = require(&g.out, "--out")?;
    let mut run = Run::start("pretrain", g.threads.into());
    let (mut cfg, replay_seed) = load_config::<PretrainRun>(g.config.as_deref(), "pretrain")?;
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.peak_lr = lr;
    }
    let seed = g.seed.or(replay_seed).unwrap_or(cfg.train.seed);
    cfg.train.seed = seed;

    run.input("tokenizer", &a.tokenizer)?;
    run.input("corpus", &a.corpus)?;
    let tok = load_tokenizer(&a.tokenizer)?;
    let sep = tok
        .special_id(END_OF_TEXT)
        .ok_or_else(|| anyhow!("tokenizer has no {END_OF_TEXT} document separator"))?;
    let mut init = match &a.resume {
        Some(p) => {
            run.input("resume", p)?;
            let ckpt = load_checkpoint(p)?;
            check_pairing(&ckpt, &tok)?;
            cfg.model = ckpt.params.config.clone();
            ckpt
        }
        None => Checkpoint::fresh(init_params::<f32>(&cfg.model, child_seed(seed, "init"))?),
    };
    if tok.vocab_size() > cfg.model.vocab_size {
        bail!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tok.vocab_size(),
            cfg.model.vocab_size
        );
    }
    init.tokenizer_hash = Some(tok.content_hash());

    let docs = read_corpus(&a.corpus)?;
    let ids: Vec<Vec<u32>> = docs.iter().map(|d| tok.encode(d).ids).collect();
    let windows = pack_corpus(&ids, sep, cfg.train.sequence_length)?;
    log::info!("{} documents packed into {} windows", docs.len(), windows.len());

    let result = run_pretrain(init, &windows, &cfg.train, &cfg.optimizer)
        .map(|o| (o.checkpoint, o.losses));
    let saved = save_result(result, out);
    run.finish(&cfg, Some(seed), &[("checkpoint", out)])?;
    let (ckpt, losses) = saved?;
    emit(
        None,
        &to_json(&json!({
            "documents": docs.len(),
            "windows": windows.len(),
            "steps_run": losses.len(),
            "step": ckpt.step,
            "final_loss": final_loss(&ckpt, &losses),
            "checkpoint_hash": ckpt.content_hash(),
        }))?,
    )
}

pub fn finetune(a: FinetuneArgs, g: &Global) -> Result<()> {
    let out = require(&g.out, "--out")?;
    let mut run = Run::start("finetune", g.threads.into());
    let (mut cfg, replay_seed) = load_config::<FinetuneRun>(g.config.as_deref(), "finetune")?;
    if !a.labels.is_empty() {
        cfg.labels = a.labels;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.finetune.batch_size = b;
    }
    if a.lr.is_some() {
        cfg.finetune.lr = a.lr;
    }
    let seed = g.seed.or(replay_seed).unwrap_or(cfg.finetune.seed);
    cfg.finetune.seed = seed;

    run.input("data", &a.data)?;
    run.input("checkpoint", &a.checkpoint)?;
    run.input("tokenizer", &a.tokenizer)?;
    let mut tok = load_tokenizer(&a.tokenizer)?;
    let mut ckpt = load_checkpoint(&a.checkpoint)?;
    check_pairing(&ckpt, &tok)?;

    let kind = match a.task {
        FinetuneTask::Mcq => DatasetKind::Mcq,
        FinetuneTask::Cls => DatasetKind::Cls {
            labels: cfg.labels.clone(),
        },
        FinetuneTask::Gen => DatasetKind::Gen,
    };
    let (dataset, skipped) = load_dataset(&a.data, &kind, g.mode())?;
    for e in &skipped {
        log::warn!("skipped: {e}");
    }
    let mut tokenizer_out = None;
    let data = match dataset {
        Dataset::Mcq(ex) => FinetuneData::MultipleChoice(ex.iter().map(|e| mcq_item(&tok, e)).collect()),
        Dataset::Cls { labels, examples } => {
            let markers = register_prompt_tokens(&mut tok, &mut ckpt.params)?;
            let path = a.tokenizer_out.clone().unwrap_or_else(|| suffixed(out, ".tokenizer.json"));
            tok.save(&path).with_context(|| format!("writing {}", path.display()))?;
            tokenizer_out = Some(path);
            let items = examples.iter().filter_map(|e| cls_item(&tok, e, &labels)).collect();
            FinetuneData::Classification {
                labels,
                markers,
                items,
            }
        }
        Dataset::Gen(ex) => FinetuneData::Generative {
            items: ex.iter().map(|e| gen_item(&tok, e)).collect(),
            stop: tok
                .special_id(END_OF_TEXT)
                .ok_or_else(|| anyhow!("tokenizer has no {END_OF_TEXT} stop token"))?,
            loss_masking: cfg.loss_masking,
        },
    };
    let hash = tok.content_hash();
    let result = run_finetune(ckpt, &data, &cfg.finetune, &cfg.optimizer).map(|mut o| {
        o.checkpoint.tokenizer_hash = Some(hash.clone());
        (o.checkpoint, o.losses)
    });
    let saved = save_result(result, out);
    let mut outputs = vec![("checkpoint", out.as_path())];
    if let Some(p) = &tokenizer_out {
        outputs.push(("tokenizer", p.as_path()));
    }
    run.finish(&cfg, Some(seed), &outputs)?;
    let (ckpt, losses) = saved?;
    emit(
        None,
        &to_json(&json!({
            "task": ckpt.task.as_ref().map(|t| t.kind.clone()),
            "skipped": skipped.len(),
            "steps_run": losses.len(),
            "final_loss": final_loss(&ckpt, &losses),
            "checkpoint_hash": ckpt.content_hash(),
            "tokenizer": tokenizer_out,
        }))?,
    )
}
