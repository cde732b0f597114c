use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::optimizer::{lr_at, AdamWConfig, AdamWState, Schedule};
use crate::tokenizer::TokenizerModel;
use crate::transformer::{
    classification_sequence, option_sequences, Batch, Bound, HeadSpec, Parameters, PromptTokens,
    TransformerError, ANSWER_TOKEN, CONTEXT_TOKEN, QUESTION_TOKEN,
};

use super::pretrain::{train_step, StepError};
use super::{child_seed, Checkpoint, LossSample, PipelineError, TaskMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct McqItem {
    pub question: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsItem {
    pub context: Vec<u32>,
    pub question: Vec<u32>,
    pub gold: usize,
}

/// A formatted prompt and the answer tokens that should follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct GenItem {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneData {
    MultipleChoice(Vec<McqItem>),
    Classification {
        labels: Vec<String>,
        markers: PromptTokens,
        items: Vec<ClsItem>,
    },
    Generative {
        items: Vec<GenItem>,
        stop: u32,
        loss_masking: bool,
    },
}

impl FinetuneData {
    fn len(&self) -> usize {
        match self {
            FinetuneData::MultipleChoice(items) => items.len(),
            FinetuneData::Classification { items, .. } => items.len(),
            FinetuneData::Generative { items, .. } => items.len(),
        }
    }

    fn head(&self) -> HeadSpec {
        match self {
            FinetuneData::MultipleChoice(_) => HeadSpec::OptionScorer,
            FinetuneData::Classification { labels, .. } => HeadSpec::Classifier {
                num_labels: labels.len(),
            },
            FinetuneData::Generative { .. } => HeadSpec::LanguageModel,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let bad = |i: usize, msg: String| Err(PipelineError::Data(format!("item {i}: {msg}")));
        match self {
            FinetuneData::MultipleChoice(items) => {
                for (i, it) in items.iter().enumerate() {
                    if it.options.is_empty() || it.options.iter().any(Vec::is_empty) {
                        return bad(i, "options must be non-empty".into());
                    }
                    if it.gold >= it.options.len() {
                        return bad(i, format!("gold {} with {} options", it.gold, it.options.len()));
                    }
                }
            }
            FinetuneData::Classification { labels, items, .. } => {
                let mut seen = std::collections::HashSet::new();
                if labels.is_empty() || !labels.iter().all(|l| seen.insert(l)) {
                    return Err(PipelineError::Data(format!("invalid label set {labels:?}")));
                }
                for (i, it) in items.iter().enumerate() {
                    if it.gold >= labels.len() {
                        return bad(i, format!("label index {} outside {labels:?}", it.gold));
                    }
                }
            }
            FinetuneData::Generative { items, .. } => {
                for (i, it) in items.iter().enumerate() {
                    if it.prompt.is_empty() || it.answer.is_empty() {
                        return bad(i, "prompt and answer must be non-empty".into());
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Replaces the optimizer's peak learning rate when set.
    pub lr: Option<f64>,
    /// Defaults to a tenth of the run.
    pub warmup_steps: Option<u64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            lr: None,
            warmup_steps: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub losses: Vec<LossSample>,
}

/// Registers `[CTX]`, `[QST]`, `[ANS]` with the tokenizer and grows the
/// embedding table to match; new rows start at the mean embedding.
pub fn register_prompt_tokens<F: Scalar>(
    tokenizer: &mut TokenizerModel,
    params: &mut Parameters<F>,
) -> Result<PromptTokens, PipelineError> {
    let ids = tokenizer
        .add_special_tokens(&[CONTEXT_TOKEN, QUESTION_TOKEN, ANSWER_TOKEN])
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let needed = tokenizer.vocab_size();
    if needed > params.config.vocab_size {
        params.grow_vocab(needed - params.config.vocab_size);
    }
    Ok(PromptTokens {
        context: ids[0],
        question: ids[1],
        answer: ids[2],
    })
}

fn mcq_loss(
    params: &Parameters<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    items: &[&McqItem],
) -> Result<Var, PipelineError> {
    let window = params.config.max_sequence;
    let mut seqs = Vec::new();
    let mut spans = Vec::with_capacity(items.len());
    for it in items {
        let s = option_sequences(&it.question, &it.options, window)?;
        spans.push(seqs.len()..seqs.len() + s.len());
        seqs.extend(s);
    }
    let batch = Batch::padded(&seqs, 0)?;
    let hidden = params.hidden_states::<ChaCha8Rng>(tape, bound, &batch, None)?;
    let scores = params.head_scores(tape, bound, hidden, &batch)?;
    let mut total: Option<Var> = None;
    for (it, span) in items.iter().zip(spans) {
        let k = span.len();
        let rows: Vec<usize> = span.collect();
        let s = tape.gather_rows(scores, &rows).map_err(TransformerError::from)?;
        let s = tape.reshape(s, &[1, k]).map_err(TransformerError::from)?;
        let l = tape.cross_entropy(s, &[it.gold]).map_err(TransformerError::from)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l).map_err(TransformerError::from)?,
        });
    }
    let total = total.ok_or_else(|| PipelineError::Data("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / items.len() as f32))
}

fn cls_loss(
    params: &Parameters<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    markers: PromptTokens,
    items: &[&ClsItem],
) -> Result<Var, PipelineError> {
    let window = params.config.max_sequence;
    let seqs = items
        .iter()
        .map(|it| classification_sequence(markers, &it.context, &it.question, window))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = Batch::padded(&seqs, 0)?;
    let hidden = params.hidden_states::<ChaCha8Rng>(tape, bound, &batch, None)?;
    let scores = params.head_scores(tape, bound, hidden, &batch)?;
    let golds: Vec<usize> = items.iter().map(|it| it.gold).collect();
    Ok(tape.cross_entropy(scores, &golds).map_err(TransformerError::from)?)
}

/// Next-token loss over `prompt ⊕ answer ⊕ stop`. With masking on, only
/// predictions of answer and stop tokens count.
pub(crate) fn generative_loss(
    params: &Parameters<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    items: &[&GenItem],
    stop: u32,
    loss_masking: bool,
) -> Result<Var, PipelineError> {
    let window = params.config.max_sequence;
    let mut seqs = Vec::with_capacity(items.len());
    for it in items {
        let mut s = it.prompt.clone();
        s.extend_from_slice(&it.answer);
        s.push(stop);
        if s.len() > window {
            return Err(PipelineError::Data(format!(
                "prompt and answer span {} tokens, window is {window}",
                s.len()
            )));
        }
        seqs.push(s);
    }
    let batch = Batch::padded(&seqs, 0)?;
    let mut targets = Vec::with_capacity(batch.ids.len());
    let mut include = Vec::with_capacity(batch.ids.len());
    for (r, (s, it)) in seqs.iter().zip(items).enumerate() {
        for t in 0..batch.seq {
            let next = t + 1;
            let real = next < s.len();
            targets.push(if real { s[next] as usize } else { 0 });
            include.push(real && (!loss_masking || next >= it.prompt.len()));
            debug_assert_eq!(batch.mask[r * batch.seq + t], t < s.len());
        }
    }
    let hidden = params.hidden_states::<ChaCha8Rng>(tape, bound, &batch, None)?;
    let logits = params.lm_logits(tape, bound, hidden)?;
    Ok(tape
        .cross_entropy_masked(logits, &targets, &include)
        .map_err(TransformerError::from)?)
}

/// Fine-tunes a checkpoint on one task. Items are reshuffled every epoch
/// from the config seed.
pub fn finetune(
    init: Checkpoint<f32>,
    data: &FinetuneData,
    config: &FinetuneConfig,
    adam: &AdamWConfig,
) -> Result<FinetuneOutcome, PipelineError> {
    data.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(PipelineError::Input("no fine-tuning examples".into()));
    }
    if config.batch_size == 0 {
        return Err(PipelineError::Config("batch size must be positive".into()));
    }
    let mut adam = adam.clone();
    if let Some(lr) = config.lr {
        adam.peak_lr = lr;
    }
    adam.validate()?;

    let mut ckpt = init;
    let head = data.head();
    if ckpt.params.head_spec() != head {
        ckpt.params.attach_head(head, child_seed(config.seed, "head"))?;
    }
    let steps_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total = steps_per_epoch * config.epochs as u64;
    let schedule = Schedule {
        warmup_steps: config.warmup_steps.unwrap_or((total / 10).max(1)),
        total_steps: total,
        floor_lr: 0.0,
    };
    let constant_lr = schedule.validate(&adam).is_err();
    if constant_lr {
        log::warn!("fine-tuning run of {total} steps is too short for warmup; using a constant rate");
    }

    let mut state = AdamWState::new(ckpt.params.named().into_iter().map(|(_, t)| t));
    let mut losses = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, &format!("epoch/{epoch}")));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = if constant_lr {
                adam.peak_lr
            } else {
                lr_at(step + 1, &schedule, &adam)?
            };
            let result = train_step(&mut ckpt.params, &mut state, &adam, lr, |p, tape, bound| {
                match data {
                    FinetuneData::MultipleChoice(items) => {
                        let batch: Vec<&McqItem> = chunk.iter().map(|&i| &items[i]).collect();
                        mcq_loss(p, tape, bound, &batch)
                    }
                    FinetuneData::Classification { markers, items, .. } => {
                        let batch: Vec<&ClsItem> = chunk.iter().map(|&i| &items[i]).collect();
                        cls_loss(p, tape, bound, *markers, &batch)
                    }
                    FinetuneData::Generative {
                        items,
                        stop,
                        loss_masking,
                    } => {
                        let batch: Vec<&GenItem> = chunk.iter().map(|&i| &items[i]).collect();
                        generative_loss(p, tape, bound, &batch, *stop, *loss_masking)
                    }
                }
            });
            let loss = match result {
                Ok(l) => l,
                Err(StepError::Failed(e)) => return Err(e),
                Err(StepError::Diverged(reason)) => {
                    ckpt.optimizer = Some(state);
                    return Err(PipelineError::Diverged {
                        step,
                        reason,
                        last_good: Box::new(ckpt),
                    });
                }
            };
            losses.push(LossSample { step, loss });
            step += 1;
        }
    }

    ckpt.step = step;
    ckpt.optimizer = Some(state);
    ckpt.loss_curve = losses.clone();
    ckpt.task = Some(match data {
        FinetuneData::MultipleChoice(_) => TaskMeta {
            kind: "multiple_choice".into(),
            labels: Vec::new(),
            prompt_tokens: None,
        },
        FinetuneData::Classification {
            labels, markers, ..
        } => TaskMeta {
            kind: "classification".into(),
            labels: labels.clone(),
            prompt_tokens: Some(*markers),
        },
        FinetuneData::Generative { .. } => TaskMeta {
            kind: "generative".into(),
            labels: Vec::new(),
            prompt_tokens: None,
        },
    });
    Ok(FinetuneOutcome {
        checkpoint: ckpt,
        losses,
    })
}
