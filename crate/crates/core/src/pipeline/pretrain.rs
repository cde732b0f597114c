use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::optimizer::{adamw_step, lr_at, AdamWConfig, AdamWState, OptimizerError, Schedule};
use crate::transformer::{Batch, Bound, Parameters};

use super::{child_seed, Checkpoint, LossSample, PipelineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub tokens_per_batch: usize,
    pub sequence_length: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub floor_lr: f64,
    pub seed: u64,
    pub eval_interval: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tokens_per_batch: 8192,
            sequence_length: 128,
            total_steps: 1000,
            warmup_steps: Schedule::DEFAULT_WARMUP,
            floor_lr: 0.0,
            seed: 0,
            eval_interval: 50,
        }
    }
}

impl PretrainConfig {
    /// 1024 sequences of 1024 tokens per batch.
    pub fn full_scale() -> Self {
        Self {
            tokens_per_batch: 1_048_576,
            sequence_length: 1024,
            ..Self::default()
        }
    }

    pub fn rows_per_batch(&self) -> usize {
        self.tokens_per_batch / self.sequence_length
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            floor_lr: self.floor_lr,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.sequence_length == 0 || self.tokens_per_batch == 0 {
            return Err(PipelineError::Config("batch and sequence sizes must be positive".into()));
        }
        if self.tokens_per_batch % self.sequence_length != 0 {
            return Err(PipelineError::Config(format!(
                "tokens_per_batch {} is not a multiple of sequence_length {}",
                self.tokens_per_batch, self.sequence_length
            )));
        }
        if self.eval_interval == 0 {
            return Err(PipelineError::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Result of a training run: the final state and the loss of every step run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub losses: Vec<LossSample>,
}

pub(crate) enum StepError {
    Diverged(String),
    Failed(PipelineError),
}

impl<E: Into<PipelineError>> From<E> for StepError {
    fn from(e: E) -> Self {
        StepError::Failed(e.into())
    }
}

/// One forward/backward/update. Parameters and state are untouched when the
/// loss or any gradient is non-finite.
pub(crate) fn train_step<B>(
    params: &mut Parameters<f32>,
    state: &mut AdamWState<f32>,
    adam: &AdamWConfig,
    lr: f64,
    build: B,
) -> Result<f64, StepError>
where
    B: FnOnce(&Parameters<f32>, &mut Tape<f32>, &Bound) -> Result<Var, PipelineError>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss_var = build(params, &mut tape, &bound)?;
    let loss = tape.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(StepError::Diverged(format!("loss is {loss}")));
    }
    let mut grads = tape.backward(loss_var).map_err(crate::transformer::TransformerError::from)?;
    let grads: Vec<_> = bound
        .vars
        .iter()
        .map(|&v| grads.take(v).expect("trainable leaf has a gradient"))
        .collect();
    let names = params.names();
    let mut tensors = params.tensors_mut();
    match adamw_step(&mut tensors, &names, &grads, state, adam, lr) {
        Ok(_) => Ok(loss),
        Err(e @ OptimizerError::NonFinite { .. }) => Err(StepError::Diverged(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

/// Next-token loss over packed windows; the last position has no target.
pub(crate) fn lm_window_loss(
    params: &Parameters<f32>,
    tape: &mut Tape<f32>,
    bound: &Bound,
    rows: &[&[u32]],
    dropout_seed: Option<u64>,
) -> Result<Var, PipelineError> {
    let batch = Batch::padded(rows, 0)?;
    let mut targets = Vec::with_capacity(batch.ids.len());
    let mut include = Vec::with_capacity(batch.ids.len());
    for r in 0..batch.rows {
        for t in 0..batch.seq {
            let i = r * batch.seq + t;
            let has_next = t + 1 < batch.seq && batch.mask[i + 1];
            targets.push(if has_next { batch.ids[i + 1] } else { 0 });
            include.push(has_next);
        }
    }
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let hidden = params.hidden_states(tape, bound, &batch, rng.as_mut())?;
    let logits = params.lm_logits(tape, bound, hidden)?;
    Ok(tape
        .cross_entropy_masked(logits, &targets, &include)
        .map_err(crate::transformer::TransformerError::from)?)
}

struct BatchPlan<'a> {
    windows: &'a [Vec<u32>],
    rows: usize,
    seed: u64,
    perms: HashMap<u64, Vec<usize>>,
}

impl<'a> BatchPlan<'a> {
    /// Windows for `step`: the concatenation of per-pass shuffles, sliced
    /// into consecutive groups of `rows`.
    fn batch(&mut self, step: u64) -> Vec<&'a [u32]> {
        let n = self.windows.len() as u64;
        (0..self.rows as u64)
            .map(|r| {
                let g = step * self.rows as u64 + r;
                let pass = g / n;
                let seed = self.seed;
                let perm = self.perms.entry(pass).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n as usize).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &format!("shuffle/{pass}")));
                    p.shuffle(&mut rng);
                    p
                });
                self.windows[perm[(g % n) as usize]].as_slice()
            })
            .collect()
    }
}

/// Runs the schedule from the checkpoint's step to `config.total_steps`.
pub fn pretrain(
    init: Checkpoint<f32>,
    windows: &[Vec<u32>],
    config: &PretrainConfig,
    adam: &AdamWConfig,
) -> Result<TrainOutcome, PipelineError> {
    pretrain_until(init, windows, config, adam, config.total_steps)
}

/// Like [`pretrain`] but stops after step `stop` so a run can be split.
pub fn pretrain_until(
    init: Checkpoint<f32>,
    windows: &[Vec<u32>],
    config: &PretrainConfig,
    adam: &AdamWConfig,
    stop: u64,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    let stop = stop.min(config.total_steps);
    let mut ckpt = init;
    if ckpt.step >= stop {
        return Ok(TrainOutcome {
            checkpoint: ckpt,
            losses: Vec::new(),
        });
    }
    let schedule = config.schedule();
    schedule.validate(adam)?;
    adam.validate()?;
    if windows.is_empty() {
        return Err(PipelineError::Input("no training windows".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.len() != config.sequence_length) {
        return Err(PipelineError::Input(format!(
            "window of {} tokens, expected {}",
            w.len(),
            config.sequence_length
        )));
    }
    if config.sequence_length > ckpt.params.config.max_sequence {
        return Err(PipelineError::Config(format!(
            "sequence length {} exceeds the model window {}",
            config.sequence_length, ckpt.params.config.max_sequence
        )));
    }
    let mut state = ckpt
        .optimizer
        .take()
        .unwrap_or_else(|| AdamWState::new(ckpt.params.named().into_iter().map(|(_, t)| t)));
    let mut plan = BatchPlan {
        windows,
        rows: config.rows_per_batch(),
        seed: config.seed,
        perms: HashMap::new(),
    };
    let dropout = ckpt.params.config.dropout > 0.0;
    let mut losses = Vec::new();
    for step in ckpt.step..stop {
        let lr = lr_at(step + 1, &schedule, adam)?;
        let rows = plan.batch(step);
        let drop_seed = dropout.then(|| child_seed(config.seed, &format!("dropout/{step}")));
        let result = train_step(&mut ckpt.params, &mut state, adam, lr, |p, tape, bound| {
            lm_window_loss(p, tape, bound, &rows, drop_seed)
        });
        let loss = match result {
            Ok(loss) => loss,
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
        let sample = LossSample { step, loss };
        losses.push(sample);
        if step % config.eval_interval == 0 || step + 1 == config.total_steps {
            ckpt.loss_curve.push(sample);
        }
        ckpt.step = step + 1;
        log::debug!("step {step} lr {lr:.3e} loss {loss:.4}");
    }
    ckpt.optimizer = Some(state);
    Ok(TrainOutcome {
        checkpoint: ckpt,
        losses,
    })
}
