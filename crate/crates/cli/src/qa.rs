use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use medlm_core::qa_harness::fixtures::{bundled_cls, bundled_mcq, Fixture, BUNDLED_ALIAS};
use medlm_core::qa_harness::{
    evaluate_cls, evaluate_mcq, generate_answers, load_dataset, ClsExample, ClsScorer,
    ConstantCls, ConstantMcq, Dataset, DatasetKind, DecodeConfig, GenExample, McqExample,
    McqScorer, ModelAccessor, OracleCls, OracleMcq, YES_NO_MAYBE,
};
use medlm_core::tokenizer::TokenizerModel;
use medlm_core::transformer::DecodeStrategy;
use serde_json::json;

use crate::run::{emit, load_config, require, to_json, usage, Run};
use crate::train::{check_pairing, load_checkpoint};
use crate::Global;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Mcq,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    /// Scores read from the gold labels; a harness self-test, not a measurement
    Oracle,
    /// Always predicts the option or label given by --constant
    Constant,
    /// A fine-tuned checkpoint with its tokenizer
    Checkpoint,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    /// JSONL path, a bundled sample name, or `appendix_fixture`
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum, default_value = "checkpoint")]
    model: Backend,
    /// Option letter or index, or label, for the constant backend
    #[arg(long)]
    constant: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Label set for classification files, comma-separated
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// JSONL file of id/question/answer records
    #[arg(long, conflicts_with = "question")]
    dataset: Option<PathBuf>,
    /// A single question
    #[arg(long)]
    question: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Sample at this temperature instead of decoding greedily
    #[arg(long)]
    temperature: Option<f64>,
    /// Candidates kept when sampling
    #[arg(long, default_value_t = 40)]
    top_k: usize,
}

enum Loaded {
    Mcq(Vec<McqExample>),
    Cls(Vec<String>, Vec<ClsExample>),
}

fn load_eval_set(a: &EvalArgs, g: &Global, run: &mut Run) -> Result<Loaded> {
    let labels: Vec<String> = if a.labels.is_empty() {
        YES_NO_MAYBE.iter().map(|s| s.to_string()).collect()
    } else {
        a.labels.clone()
    };
    if a.dataset == BUNDLED_ALIAS {
        return Ok(match a.task {
            EvalTask::Mcq => Loaded::Mcq(bundled_mcq()?),
            EvalTask::Cls => {
                let (l, ex) = bundled_cls()?;
                Loaded::Cls(l, ex)
            }
        });
    }
    let (dataset, skipped) = if let Some(f) = Fixture::from_name(&a.dataset) {
        (f.load()?, Vec::new())
    } else {
        let path = Path::new(&a.dataset);
        run.input("dataset", path)?;
        let kind = match a.task {
            EvalTask::Mcq => DatasetKind::Mcq,
            EvalTask::Cls => DatasetKind::Cls { labels },
        };
        load_dataset(path, &kind, g.mode())?
    };
    for e in &skipped {
        log::warn!("skipped: {e}");
    }
    Ok(match (dataset, a.task) {
        (Dataset::Mcq(ex), EvalTask::Mcq) => Loaded::Mcq(ex),
        (Dataset::Cls { labels, examples }, EvalTask::Cls) => Loaded::Cls(labels, examples),
        _ => bail!("dataset {} does not hold {:?} items", a.dataset, a.task),
    })
}

fn constant_index(value: &str) -> Result<usize> {
    let v = value.trim();
    if let Ok(i) = v.parse::<usize>() {
        return Ok(i);
    }
    match v.as_bytes() {
        [c] if c.is_ascii_alphabetic() => Ok((c.to_ascii_uppercase() - b'A') as usize),
        _ => Err(usage(format!("--constant {v:?} is neither a letter nor an index"))),
    }
}

pub fn eval(a: EvalArgs, g: &Global) -> Result<()> {
    let mut run = Run::start("eval", g.threads.into());
    let loaded = load_eval_set(&a, g, &mut run)?;
    let name = a.dataset.clone();

    let model = match a.model {
        Backend::Checkpoint => {
            let ckpt_path = require(&a.checkpoint, "--checkpoint")?;
            let tok_path = require(&a.tokenizer, "--tokenizer")?;
            run.input("checkpoint", ckpt_path)?;
            run.input("tokenizer", tok_path)?;
            let ckpt = load_checkpoint(ckpt_path)?;
            let tok = TokenizerModel::load(tok_path)?;
            check_pairing(&ckpt, &tok)?;
            Some((ckpt, tok))
        }
        Backend::Oracle => {
            log::warn!("oracle backend reads gold labels; its accuracy is a self-test, not a result");
            None
        }
        Backend::Constant => None,
    };
    let accessor = model
        .as_ref()
        .map(|(c, t)| ModelAccessor::new(&c.params, t, c.task.as_ref()));

    let mut report = match loaded {
        Loaded::Mcq(ex) => {
            let scorer: Box<dyn McqScorer + '_> = match a.model {
                Backend::Oracle => Box::new(OracleMcq::new(&ex)),
                Backend::Constant => Box::new(ConstantMcq(constant_index(require(&a.constant, "--constant")?)?)),
                Backend::Checkpoint => Box::new(accessor.clone().expect("loaded above")),
            };
            evaluate_mcq(scorer.as_ref(), &ex, &name, g.mode())?
        }
        Loaded::Cls(labels, ex) => {
            let scorer: Box<dyn ClsScorer + '_> = match a.model {
                Backend::Oracle => Box::new(OracleCls::new(&ex)),
                Backend::Constant => Box::new(ConstantCls(require(&a.constant, "--constant")?.clone())),
                Backend::Checkpoint => Box::new(accessor.clone().expect("loaded above")),
            };
            evaluate_cls(scorer.as_ref(), &ex, &labels, &name, g.mode())?
        }
    };
    report.checkpoint_hash = model.as_ref().map(|(c, _)| c.content_hash());
    emit(g.out.as_deref(), &to_json(&report)?)?;
    if let Some(out) = &g.out {
        let snapshot = json!({
            "task": format!("{:?}", a.task).to_lowercase(),
            "dataset": a.dataset,
            "model": format!("{:?}", a.model).to_lowercase(),
            "constant": a.constant,
            "labels": a.labels,
            "strict": !g.permissive,
        });
        run.finish(&snapshot, None, &[("report", out)])?;
    }
    Ok(())
}

pub fn generate(a: GenerateArgs, g: &Global) -> Result<()> {
    let mut run = Run::start("generate", g.threads.into());
    let (mut decode, replay_seed) = load_config::<DecodeConfig>(g.config.as_deref(), "generate")?;
    if let Some(n) = a.max_new_tokens {
        decode.max_new_tokens = n;
    }
    if let Some(t) = a.temperature {
        decode.strategy = DecodeStrategy::Sample {
            temperature: t,
            top_k: a.top_k,
        };
    }
    if let Some(s) = g.seed.or(replay_seed) {
        decode.seed = s;
    }

    let examples = match (&a.dataset, &a.question) {
        (Some(path), None) => {
            run.input("dataset", path)?;
            let (dataset, skipped) = load_dataset(path, &DatasetKind::Gen, g.mode())?;
            for e in &skipped {
                log::warn!("skipped: {e}");
            }
            match dataset {
                Dataset::Gen(ex) => ex,
                _ => unreachable!("generative kind requested"),
            }
        }
        (None, Some(q)) => vec![GenExample {
            id: "question".into(),
            question: q.clone(),
            answer: String::new(),
        }],
        _ => return Err(usage("give either --dataset or --question")),
    };
    run.input("checkpoint", &a.checkpoint)?;
    run.input("tokenizer", &a.tokenizer)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let tok = TokenizerModel::load(&a.tokenizer)?;
    check_pairing(&ckpt, &tok)?;
    let accessor = ModelAccessor::new(&ckpt.params, &tok, ckpt.task.as_ref());
    let name = a
        .dataset
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "question".into());
    let mut transcript = generate_answers(&accessor, &examples, &decode, &name, g.mode())?;
    transcript.checkpoint_hash = Some(ckpt.content_hash());
    emit(g.out.as_deref(), &to_json(&transcript)?)?;
    if let Some(out) = &g.out {
        run.finish(&decode, Some(decode.seed), &[("transcript", out)])?;
    }
    Ok(())
}
