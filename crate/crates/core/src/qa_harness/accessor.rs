use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::pipeline::{ClsItem, GenItem, McqItem, TaskMeta};
use crate::tokenizer::{TokenizerModel, END_OF_TEXT};
use crate::transformer::{classification_sequence, DecodeStrategy, Parameters, PromptTokens};

use super::{ClsExample, GenExample, McqExample};

/// Scores the options of one question. Implementations never see the gold.
pub trait McqScorer {
    fn score_options(&self, id: &str, question: &str, options: &[String]) -> Result<Vec<f64>, String>;
}

/// Scores each of `labels` for one context/question pair.
pub trait ClsScorer {
    fn classify(
        &self,
        id: &str,
        context: &str,
        question: &str,
        labels: &[String],
    ) -> Result<Vec<f64>, String>;
}

/// Produces a free-text answer to `question`.
pub trait Generator {
    fn generate(&self, id: &str, question: &str, config: &DecodeConfig) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

/// Scores the gold option 1 and every other option 0. For harness self-tests only.
#[derive(Debug, Clone)]
pub struct OracleMcq {
    gold: HashMap<String, usize>,
}

impl OracleMcq {
    pub fn new(examples: &[McqExample]) -> Self {
        Self {
            gold: examples.iter().map(|e| (e.id.clone(), e.gold)).collect(),
        }
    }
}

fn one_hot(k: usize, hot: usize) -> Vec<f64> {
    (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
}

impl McqScorer for OracleMcq {
    fn score_options(&self, id: &str, _: &str, options: &[String]) -> Result<Vec<f64>, String> {
        let g = *self.gold.get(id).ok_or_else(|| format!("oracle has no answer for {id}"))?;
        Ok(one_hot(options.len(), g))
    }
}

#[derive(Debug, Clone)]
pub struct OracleCls {
    gold: HashMap<String, String>,
}

impl OracleCls {
    pub fn new(examples: &[ClsExample]) -> Self {
        Self {
            gold: examples.iter().map(|e| (e.id.clone(), e.gold.clone())).collect(),
        }
    }
}

impl ClsScorer for OracleCls {
    fn classify(&self, id: &str, _: &str, _: &str, labels: &[String]) -> Result<Vec<f64>, String> {
        let g = self.gold.get(id).ok_or_else(|| format!("oracle has no answer for {id}"))?;
        let hot = labels.iter().position(|l| l == g).ok_or("gold outside label set")?;
        Ok(one_hot(labels.len(), hot))
    }
}

/// Always prefers the option at a fixed index.
#[derive(Debug, Clone, Copy)]
pub struct ConstantMcq(pub usize);

impl McqScorer for ConstantMcq {
    fn score_options(&self, _: &str, _: &str, options: &[String]) -> Result<Vec<f64>, String> {
        if self.0 >= options.len() {
            return Err(format!("no option {} among {}", self.0, options.len()));
        }
        Ok(one_hot(options.len(), self.0))
    }
}

/// Always prefers one label.
#[derive(Debug, Clone)]
pub struct ConstantCls(pub String);

impl ClsScorer for ConstantCls {
    fn classify(&self, _: &str, _: &str, _: &str, labels: &[String]) -> Result<Vec<f64>, String> {
        let hot = labels
            .iter()
            .position(|l| *l == self.0)
            .ok_or_else(|| format!("label {:?} not in {labels:?}", self.0))?;
        Ok(one_hot(labels.len(), hot))
    }
}

/// Encodes user text; special-token literals inside it stay plain bytes.
pub fn encode_text(tokenizer: &TokenizerModel, text: &str) -> Vec<u32> {
    tokenizer.encode_ordinary(text).ids
}

/// Encodes text that continues a sequence, so it carries one leading space.
pub fn encode_option(tokenizer: &TokenizerModel, text: &str) -> Vec<u32> {
    if tokenizer.config().add_prefix_space {
        encode_text(tokenizer, text)
    } else {
        encode_text(tokenizer, &format!(" {text}"))
    }
}

pub fn gen_prompt(question: &str) -> String {
    format!("Question: {question}\nAnswer:")
}

/// Runs a trained model through the harness interfaces.
#[derive(Clone)]
pub struct ModelAccessor<'a> {
    pub params: &'a Parameters<f32>,
    pub tokenizer: &'a TokenizerModel,
    /// Label order of the model's classifier head.
    pub labels: Vec<String>,
    pub markers: Option<PromptTokens>,
    pub stop: Option<u32>,
}

impl<'a> ModelAccessor<'a> {
    pub fn new(params: &'a Parameters<f32>, tokenizer: &'a TokenizerModel, task: Option<&TaskMeta>) -> Self {
        Self {
            params,
            tokenizer,
            labels: task.map(|t| t.labels.clone()).unwrap_or_default(),
            markers: task.and_then(|t| t.prompt_tokens),
            stop: tokenizer.special_id(END_OF_TEXT),
        }
    }

    /// The exact token sequence fed to the classifier.
    pub fn cls_sequence(&self, context: &str, question: &str) -> Result<Vec<u32>, String> {
        let markers = self.markers.ok_or("model has no prompt markers")?;
        classification_sequence(
            markers,
            &encode_text(self.tokenizer, context),
            &encode_option(self.tokenizer, question),
            self.params.config.max_sequence,
        )
        .map_err(|e| e.to_string())
    }
}

impl McqScorer for ModelAccessor<'_> {
    fn score_options(&self, _: &str, question: &str, options: &[String]) -> Result<Vec<f64>, String> {
        let q = encode_text(self.tokenizer, question);
        let opts: Vec<Vec<u32>> = options.iter().map(|o| encode_option(self.tokenizer, o)).collect();
        self.params.score_options(&q, &opts).map_err(|e| e.to_string())
    }
}

impl ClsScorer for ModelAccessor<'_> {
    fn classify(
        &self,
        _: &str,
        context: &str,
        question: &str,
        labels: &[String],
    ) -> Result<Vec<f64>, String> {
        let markers = self.markers.ok_or("model has no prompt markers")?;
        let all = self
            .params
            .classify_sequence(
                markers,
                &encode_text(self.tokenizer, context),
                &encode_option(self.tokenizer, question),
            )
            .map_err(|e| e.to_string())?;
        labels
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|m| m == l)
                    .map(|i| all[i])
                    .ok_or_else(|| format!("model was not trained on label {l:?}"))
            })
            .collect()
    }
}

impl Generator for ModelAccessor<'_> {
    fn generate(&self, _: &str, question: &str, config: &DecodeConfig) -> Result<String, String> {
        let mut prompt = encode_text(self.tokenizer, &gen_prompt(question));
        let room = self.params.config.max_sequence - 1;
        if prompt.len() > room {
            prompt.drain(..prompt.len() - room);
        }
        let out = self
            .params
            .generate(&prompt, config.strategy, config.max_new_tokens, self.stop, config.seed)
            .map_err(|e| e.to_string())?;
        let text = self
            .tokenizer
            .decode(&out[prompt.len()..])
            .map_err(|e| e.to_string())?;
        Ok(text.strip_prefix(' ').map(str::to_string).unwrap_or(text))
    }
}

/// Training item with the same encoding the model accessor uses for scoring.
pub fn mcq_item(tokenizer: &TokenizerModel, ex: &McqExample) -> McqItem {
    McqItem {
        question: encode_text(tokenizer, &ex.question),
        options: ex.options.iter().map(|o| encode_option(tokenizer, o)).collect(),
        gold: ex.gold,
    }
}

pub fn cls_item(tokenizer: &TokenizerModel, ex: &ClsExample, labels: &[String]) -> Option<ClsItem> {
    Some(ClsItem {
        context: encode_text(tokenizer, &ex.context),
        question: encode_option(tokenizer, &ex.question),
        gold: labels.iter().position(|l| *l == ex.gold)?,
    })
}

pub fn gen_item(tokenizer: &TokenizerModel, ex: &GenExample) -> GenItem {
    GenItem {
        prompt: encode_text(tokenizer, &gen_prompt(&ex.question)),
        answer: encode_option(tokenizer, &ex.answer),
    }
}
