//! Benchmark-shaped QA datasets, model accessors and accuracy reports.

mod accessor;
mod eval;
pub mod fixtures;

pub use accessor::{
    cls_item, encode_option, encode_text, gen_item, gen_prompt, mcq_item, ClsScorer, ConstantCls,
    ConstantMcq, DecodeConfig, Generator, McqScorer, ModelAccessor, OracleCls, OracleMcq,
};
pub use eval::{
    evaluate_cls, evaluate_mcq, generate_answers, letter, EvalReport, ItemRecord, Transcript,
    TranscriptEntry,
};

use std::collections::HashSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 26;

pub const YES_NO_MAYBE: [&str; 3] = ["yes", "no", "maybe"];
pub const YES_NO: [&str; 2] = ["yes", "no"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Data { line: usize, message: String },
    #[error("invalid label set: {0}")]
    Labels(String),
    #[error("item {id}: {message}")]
    Item { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// Any bad record or item fails the whole operation.
    #[default]
    Strict,
    /// Bad records are skipped and reported.
    Permissive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqExample {
    pub id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsExample {
    pub id: String,
    pub context: String,
    pub question: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenExample {
    pub id: String,
    pub question: String,
    pub answer: String,
}

pub trait Record: DeserializeOwned {
    fn id(&self) -> &str;
    fn check(&self, labels: &[String]) -> Result<(), String>;
}

fn non_empty(field: &str, text: &str) -> Result<(), String> {
    if text.trim().is_empty() {
        Err(format!("{field} is empty"))
    } else {
        Ok(())
    }
}

impl Record for McqExample {
    fn id(&self) -> &str {
        &self.id
    }

    fn check(&self, _: &[String]) -> Result<(), String> {
        non_empty("id", &self.id)?;
        non_empty("question", &self.question)?;
        let k = self.options.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&k) {
            return Err(format!("{k} options, expected {MIN_OPTIONS} to {MAX_OPTIONS}"));
        }
        for (i, o) in self.options.iter().enumerate() {
            non_empty(&format!("option {}", letter(i)), o)?;
        }
        if self.gold >= k {
            return Err(format!("gold {} out of range for {k} options (0..={})", self.gold, k - 1));
        }
        Ok(())
    }
}

impl Record for ClsExample {
    fn id(&self) -> &str {
        &self.id
    }

    fn check(&self, labels: &[String]) -> Result<(), String> {
        non_empty("id", &self.id)?;
        non_empty("context", &self.context)?;
        non_empty("question", &self.question)?;
        if !labels.contains(&self.gold) {
            return Err(format!("gold {:?} not in label set {labels:?}", self.gold));
        }
        Ok(())
    }
}

impl Record for GenExample {
    fn id(&self) -> &str {
        &self.id
    }

    fn check(&self, _: &[String]) -> Result<(), String> {
        non_empty("id", &self.id)?;
        non_empty("question", &self.question)?;
        non_empty("answer", &self.answer)
    }
}

/// Parsed records plus, in permissive mode, the errors that were skipped.
#[derive(Debug)]
pub struct Loaded<T> {
    pub examples: Vec<T>,
    pub skipped: Vec<HarnessError>,
}

pub fn check_labels(labels: &[String]) -> Result<(), HarnessError> {
    let mut seen = HashSet::new();
    if labels.is_empty() {
        return Err(HarnessError::Labels("empty".into()));
    }
    for l in labels {
        if l.is_empty() || !seen.insert(l) {
            return Err(HarnessError::Labels(format!("{labels:?}")));
        }
    }
    Ok(())
}

/// Parses one JSON record per line. Blank lines are ignored; ids must be unique.
pub fn parse_jsonl<T: Record>(
    text: &str,
    labels: &[String],
    mode: Strictness,
) -> Result<Loaded<T>, HarnessError> {
    let mut out = Loaded {
        examples: Vec::new(),
        skipped: Vec::new(),
    };
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let result = serde_json::from_str::<T>(raw)
            .map_err(|e| HarnessError::Parse {
                line,
                message: e.to_string(),
            })
            .and_then(|rec| {
                rec.check(labels)
                    .map_err(|message| HarnessError::Data { line, message })?;
                if !ids.insert(rec.id().to_string()) {
                    return Err(HarnessError::Data {
                        line,
                        message: format!("duplicate id {:?}", rec.id()),
                    });
                }
                Ok(rec)
            });
        match (result, mode) {
            (Ok(rec), _) => out.examples.push(rec),
            (Err(e), Strictness::Strict) => return Err(e),
            (Err(e), Strictness::Permissive) => {
                log::warn!("skipping record: {e}");
                out.skipped.push(e);
            }
        }
    }
    Ok(out)
}

pub fn load_jsonl<T: Record>(
    path: &Path,
    labels: &[String],
    mode: Strictness,
) -> Result<Loaded<T>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(&text, labels, mode)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    Mcq,
    Cls { labels: Vec<String> },
    Gen,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Mcq(Vec<McqExample>),
    Cls {
        labels: Vec<String>,
        examples: Vec<ClsExample>,
    },
    Gen(Vec<GenExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Mcq(e) => e.len(),
            Dataset::Cls { examples, .. } => examples.len(),
            Dataset::Gen(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loads and validates a dataset file of the given kind.
pub fn load_dataset(
    path: &Path,
    kind: &DatasetKind,
    mode: Strictness,
) -> Result<(Dataset, Vec<HarnessError>), HarnessError> {
    Ok(match kind {
        DatasetKind::Mcq => {
            let l = load_jsonl(path, &[], mode)?;
            (Dataset::Mcq(l.examples), l.skipped)
        }
        DatasetKind::Cls { labels } => {
            check_labels(labels)?;
            let l = load_jsonl(path, labels, mode)?;
            (
                Dataset::Cls {
                    labels: labels.clone(),
                    examples: l.examples,
                },
                l.skipped,
            )
        }
        DatasetKind::Gen => {
            let l = load_jsonl(path, &[], mode)?;
            (Dataset::Gen(l.examples), l.skipped)
        }
    })
}
