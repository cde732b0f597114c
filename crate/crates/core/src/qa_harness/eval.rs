use serde::{Deserialize, Serialize};

use crate::pipeline::child_seed;
use crate::transformer::argmax;

use super::{
    check_labels, ClsExample, ClsScorer, DecodeConfig, GenExample, Generator, HarnessError,
    McqExample, McqScorer, Strictness,
};

/// `A` for 0, `B` for 1, and so on.
pub fn letter(i: usize) -> String {
    char::from_u32('A' as u32 + i as u32)
        .map(String::from)
        .unwrap_or_else(|| i.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub prediction: Option<String>,
    pub gold: String,
    pub scores: Vec<f64>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub task: String,
    /// Items that were scored; failed items are excluded.
    pub n: usize,
    pub correct: usize,
    /// `correct / n`, or 0 when nothing was scored.
    pub accuracy: f64,
    pub failed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    /// Counts indexed `[gold][prediction]` over `labels`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub confusion: Vec<Vec<usize>>,
    pub items: Vec<ItemRecord>,
    pub tool_version: String,
    pub checkpoint_hash: Option<String>,
}

impl EvalReport {
    fn new(dataset: &str, task: &str) -> Self {
        Self {
            dataset: dataset.to_string(),
            task: task.to_string(),
            n: 0,
            correct: 0,
            accuracy: 0.0,
            failed: 0,
            labels: Vec::new(),
            confusion: Vec::new(),
            items: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_hash: None,
        }
    }

    fn finish(mut self) -> Self {
        self.n = self.items.iter().filter(|r| r.error.is_none()).count();
        self.correct = self.items.iter().filter(|r| r.correct).count();
        self.failed = self.items.len() - self.n;
        self.accuracy = if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        };
        self
    }
}

fn pick(scores: &[f64], k: usize) -> Result<usize, String> {
    if scores.len() != k {
        return Err(format!("{} scores for {k} choices", scores.len()));
    }
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return Err(format!("non-finite score {x}"));
    }
    argmax(scores).ok_or_else(|| "no scores".to_string())
}

fn failure(
    mode: Strictness,
    id: &str,
    gold: String,
    message: String,
) -> Result<ItemRecord, HarnessError> {
    if mode == Strictness::Strict {
        return Err(HarnessError::Item {
            id: id.to_string(),
            message,
        });
    }
    log::warn!("item {id}: {message}");
    Ok(ItemRecord {
        id: id.to_string(),
        prediction: None,
        gold,
        scores: Vec::new(),
        correct: false,
        error: Some(message),
    })
}

/// Predicts the highest-scoring option of every item. Predictions and golds
/// are reported as letters.
pub fn evaluate_mcq<S: McqScorer + ?Sized>(
    scorer: &S,
    examples: &[McqExample],
    dataset: &str,
    mode: Strictness,
) -> Result<EvalReport, HarnessError> {
    let mut report = EvalReport::new(dataset, "mcq");
    for ex in examples {
        let gold = letter(ex.gold);
        let record = match scorer
            .score_options(&ex.id, &ex.question, &ex.options)
            .and_then(|s| pick(&s, ex.options.len()).map(|p| (s, p)))
        {
            Ok((scores, p)) => ItemRecord {
                id: ex.id.clone(),
                prediction: Some(letter(p)),
                gold,
                scores,
                correct: p == ex.gold,
                error: None,
            },
            Err(msg) => failure(mode, &ex.id, gold, msg)?,
        };
        report.items.push(record);
    }
    Ok(report.finish())
}

/// Predicts the highest-scoring label of every item.
pub fn evaluate_cls<S: ClsScorer + ?Sized>(
    scorer: &S,
    examples: &[ClsExample],
    labels: &[String],
    dataset: &str,
    mode: Strictness,
) -> Result<EvalReport, HarnessError> {
    check_labels(labels)?;
    let mut report = EvalReport::new(dataset, "cls");
    report.labels = labels.to_vec();
    report.confusion = vec![vec![0; labels.len()]; labels.len()];
    for ex in examples {
        let Some(g) = labels.iter().position(|l| *l == ex.gold) else {
            report
                .items
                .push(failure(mode, &ex.id, ex.gold.clone(), "gold outside label set".into())?);
            continue;
        };
        let record = match scorer
            .classify(&ex.id, &ex.context, &ex.question, labels)
            .and_then(|s| pick(&s, labels.len()).map(|p| (s, p)))
        {
            Ok((scores, p)) => {
                report.confusion[g][p] += 1;
                ItemRecord {
                    id: ex.id.clone(),
                    prediction: Some(labels[p].clone()),
                    gold: ex.gold.clone(),
                    scores,
                    correct: p == g,
                    error: None,
                }
            }
            Err(msg) => failure(mode, &ex.id, ex.gold.clone(), msg)?,
        };
        report.items.push(record);
    }
    Ok(report.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub id: String,
    pub question: String,
    pub reference: String,
    pub generated: Option<String>,
    /// Seed used for this item, derived from the decode seed and the item id.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub dataset: String,
    pub decode: DecodeConfig,
    pub entries: Vec<TranscriptEntry>,
    pub tool_version: String,
    pub checkpoint_hash: Option<String>,
}

impl Transcript {
    /// Entries whose generation equals the reference exactly.
    pub fn exact_matches(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.generated.as_deref() == Some(e.reference.as_str()))
            .count()
    }
}

/// Generates an answer for every question. Nothing is scored.
pub fn generate_answers<G: Generator + ?Sized>(
    generator: &G,
    examples: &[GenExample],
    decode: &DecodeConfig,
    dataset: &str,
    mode: Strictness,
) -> Result<Transcript, HarnessError> {
    let mut entries = Vec::with_capacity(examples.len());
    for ex in examples {
        let seed = child_seed(decode.seed, &ex.id);
        let cfg = DecodeConfig {
            seed,
            ..decode.clone()
        };
        let (generated, error) = match generator.generate(&ex.id, &ex.question, &cfg) {
            Ok(text) => (Some(text), None),
            Err(message) if mode == Strictness::Strict => {
                return Err(HarnessError::Item {
                    id: ex.id.clone(),
                    message,
                })
            }
            Err(message) => (None, Some(message)),
        };
        entries.push(TranscriptEntry {
            id: ex.id.clone(),
            question: ex.question.clone(),
            reference: ex.answer.clone(),
            generated,
            seed,
            error,
        });
    }
    Ok(Transcript {
        dataset: dataset.to_string(),
        decode: decode.clone(),
        entries,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_hash: None,
    })
}
