use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;

use super::{Batch, HeadSpec, Parameters, TransformerError};

pub const CONTEXT_TOKEN: &str = "[CTX]";
pub const QUESTION_TOKEN: &str = "[QST]";
pub const ANSWER_TOKEN: &str = "[ANS]";

/// Ids of the three prompt markers in the fine-tuning vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub context: u32,
    pub question: u32,
    pub answer: u32,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// `question ⊕ option` for each option, dropping question tokens from the
/// left until every sequence fits in `max_len`.
pub fn option_sequences<O: AsRef<[u32]>>(
    question: &[u32],
    options: &[O],
    max_len: usize,
) -> Result<Vec<Vec<u32>>, TransformerError> {
    if options.is_empty() {
        return Err(TransformerError::Contract("no options to score".into()));
    }
    options
        .iter()
        .map(|o| {
            let o = o.as_ref();
            if o.len() > max_len || (o.is_empty() && question.is_empty()) {
                return Err(TransformerError::Contract(format!(
                    "option of {} tokens cannot be scored in a window of {max_len}",
                    o.len()
                )));
            }
            let keep = question.len().min(max_len - o.len());
            if keep == 0 && o.is_empty() {
                return Err(TransformerError::Contract("empty option".into()));
            }
            let mut seq = question[question.len() - keep..].to_vec();
            seq.extend_from_slice(o);
            Ok(seq)
        })
        .collect()
}

/// `[CTX] context [QST] question [ANS]`, dropping context tokens from the
/// left when the whole does not fit in `max_len`.
pub fn classification_sequence(
    markers: PromptTokens,
    context: &[u32],
    question: &[u32],
    max_len: usize,
) -> Result<Vec<u32>, TransformerError> {
    let fixed = question.len() + 3;
    if fixed > max_len {
        return Err(TransformerError::Contract(format!(
            "question of {} tokens leaves no room in a window of {max_len}",
            question.len()
        )));
    }
    let keep = context.len().min(max_len - fixed);
    let mut seq = Vec::with_capacity(keep + fixed);
    seq.push(markers.context);
    seq.extend_from_slice(&context[context.len() - keep..]);
    seq.push(markers.question);
    seq.extend_from_slice(question);
    seq.push(markers.answer);
    Ok(seq)
}

/// Decoding rule for [`Parameters::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeStrategy {
    Greedy,
    Sample { temperature: f64, top_k: usize },
}

impl<F: Scalar> Parameters<F> {
    /// One option-scorer score per option.
    pub fn score_options<O: AsRef<[u32]>>(
        &self,
        question: &[u32],
        options: &[O],
    ) -> Result<Vec<f64>, TransformerError> {
        let seqs = option_sequences(question, options, self.config.max_sequence)?;
        let batch = Batch::padded(&seqs, 0)?;
        let scores = self.forward(&batch, HeadSpec::OptionScorer)?;
        Ok(scores.to_f64_vec())
    }

    /// Label scores read at the `[ANS]` marker.
    pub fn classify_sequence(
        &self,
        markers: PromptTokens,
        context: &[u32],
        question: &[u32],
    ) -> Result<Vec<f64>, TransformerError> {
        if !matches!(self.head_spec(), HeadSpec::Classifier { .. }) {
            return Err(TransformerError::Contract(
                "model has no classifier head".into(),
            ));
        }
        let seq = classification_sequence(markers, context, question, self.config.max_sequence)?;
        let batch = Batch::padded(&[seq], 0)?;
        Ok(self.forward(&batch, self.head_spec())?.to_f64_vec())
    }

    /// Autoregressive continuation of `prompt`. The returned sequence starts
    /// with the prompt; the stop token, when produced, is not included.
    pub fn generate(
        &self,
        prompt: &[u32],
        strategy: DecodeStrategy,
        max_new: usize,
        stop: Option<u32>,
        seed: u64,
    ) -> Result<Vec<u32>, TransformerError> {
        let window = self.config.max_sequence;
        if prompt.is_empty() || prompt.len() >= window {
            return Err(TransformerError::Contract(format!(
                "prompt of {} tokens must be non-empty and shorter than {window}",
                prompt.len()
            )));
        }
        if let DecodeStrategy::Sample { temperature, top_k } = strategy {
            if !(temperature > 0.0) || top_k == 0 {
                return Err(TransformerError::Config(
                    "sampling needs temperature > 0 and top_k >= 1".into(),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            let start = out.len().saturating_sub(window);
            let ctx = &out[start..];
            let batch = Batch::padded(&[ctx], 0)?;
            let logits = self.forward(&batch, HeadSpec::LanguageModel)?;
            let v = self.config.vocab_size;
            let last: Vec<f64> = logits.data()[(ctx.len() - 1) * v..ctx.len() * v]
                .iter()
                .map(|x| x.as_f64())
                .collect();
            let next = match strategy {
                DecodeStrategy::Greedy => argmax(&last).expect("non-empty vocabulary"),
                DecodeStrategy::Sample { temperature, top_k } => {
                    sample_top_k(&last, temperature, top_k, &mut rng)
                }
            } as u32;
            if Some(next) == stop {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

fn sample_top_k<R: Rng>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(logits.len()));
    let max = logits[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in order.iter().zip(&weights) {
        if u < *w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("top_k >= 1")
}
