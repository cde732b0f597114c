use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use medlm_core::tokenizer::{
    compare_tokenizers, read_corpus, train_tokenizer, TokenizerModel, TokenizerTrainConfig,
};
use serde_json::json;

use crate::run::{emit, load_config, require, to_json, Run};
use crate::Global;

#[derive(Subcommand, Debug)]
pub enum TokenizerCmd {
    /// Learn merges from a corpus file or directory
    Train(TrainArgs),
    /// Print the token ids of a text
    Encode(EncodeArgs),
    /// Print the text of a sequence of ids
    Decode(DecodeArgs),
    /// Count tokens per term under two tokenizers
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus file or directory; one document per non-empty line
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_frequency: Option<u64>,
    /// Special token literal; repeat for several. Replaces the configured list.
    #[arg(long = "special")]
    specials: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text to encode; stdin when absent
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Whitespace- or comma-separated ids; stdin when absent
    #[arg(long)]
    ids: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// One term per line
    #[arg(long)]
    terms: PathBuf,
}

fn load(path: &Path) -> Result<TokenizerModel> {
    TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

fn input_or_stdin(value: Option<String>) -> Result<String> {
    match value {
        Some(v) => Ok(v),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s)
        }
    }
}

pub fn run(cmd: TokenizerCmd, g: &Global) -> Result<()> {
    match cmd {
        TokenizerCmd::Train(a) => train(a, g),
        TokenizerCmd::Encode(a) => {
            let model = load(&a.model)?;
            let text = input_or_stdin(a.text)?;
            let ids: Vec<String> = model.encode(&text).ids.iter().map(u32::to_string).collect();
            emit(g.out.as_deref(), &(ids.join(" ") + "\n"))
        }
        TokenizerCmd::Decode(a) => {
            let model = load(&a.model)?;
            let raw = input_or_stdin(a.ids)?;
            let ids = raw
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u32>().with_context(|| format!("bad token id {s:?}")))
                .collect::<Result<Vec<_>>>()?;
            emit(g.out.as_deref(), &model.decode(&ids)?)
        }
        TokenizerCmd::Compare(a) => compare(a, g),
    }
}

fn train(a: TrainArgs, g: &Global) -> Result<()> {
    let out = require(&g.out, "--out")?;
    let mut run = Run::start("tokenizer train", g.threads.into());
    let (mut cfg, _) = load_config::<TokenizerTrainConfig>(g.config.as_deref(), "tokenizer train")?;
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    if let Some(m) = a.min_frequency {
        cfg.min_frequency = m;
    }
    if !a.specials.is_empty() {
        cfg.special_tokens = a.specials;
    }
    run.input("corpus", &a.corpus)?;
    let docs = read_corpus(&a.corpus)?;
    let model = train_tokenizer(&docs, &cfg)?;
    model.save(out).with_context(|| format!("writing {}", out.display()))?;
    run.finish(&cfg, None, &[("tokenizer", out)])?;
    emit(
        None,
        &to_json(&json!({
            "documents": docs.len(),
            "vocab_size": model.vocab_size(),
            "merges": model.num_merges(),
            "content_hash": model.content_hash(),
        }))?,
    )
}

fn compare(a: CompareArgs, g: &Global) -> Result<()> {
    let mut run = Run::start("tokenizer compare", g.threads.into());
    let model_a = load(&a.a)?;
    let model_b = load(&a.b)?;
    let text = fs::read_to_string(&a.terms)
        .with_context(|| format!("reading {}", a.terms.display()))?;
    let terms: Vec<&str> = text.lines().map(str::trim).filter(|t| !t.is_empty()).collect();
    let report = compare_tokenizers(&model_a, &model_b, &terms);
    emit(g.out.as_deref(), &to_json(&report)?)?;
    if let Some(out) = &g.out {
        run.input("a", &a.a)?;
        run.input("b", &a.b)?;
        run.input("terms", &a.terms)?;
        run.finish(&json!({}), None, &[("report", out)])?;
    }
    Ok(())
}
