use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};

use super::{ModelConfig, TransformerError};

pub const INIT_STD: f64 = 0.02;

/// Which output the network produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadSpec {
    LanguageModel,
    OptionScorer,
    Classifier { num_labels: usize },
}

impl HeadSpec {
    /// Number of scores a task head emits; `None` for the language model.
    pub fn outputs(self) -> Option<usize> {
        match self {
            HeadSpec::LanguageModel => None,
            HeadSpec::OptionScorer => Some(1),
            HeadSpec::Classifier { num_labels } => Some(num_labels),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Block<F> {
    pub ln_1_weight: Tensor<F>,
    pub ln_1_bias: Tensor<F>,
    pub attn_weight: Tensor<F>,
    pub attn_bias: Tensor<F>,
    pub attn_proj_weight: Tensor<F>,
    pub attn_proj_bias: Tensor<F>,
    pub ln_2_weight: Tensor<F>,
    pub ln_2_bias: Tensor<F>,
    pub fc_weight: Tensor<F>,
    pub fc_bias: Tensor<F>,
    pub mlp_proj_weight: Tensor<F>,
    pub mlp_proj_bias: Tensor<F>,
}

/// Linear map from a hidden state to `k` scores; `weight` is `[k, H]`.
#[derive(Clone, PartialEq)]
pub struct TaskHead<F> {
    pub spec: HeadSpec,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// All model weights. The language-model head reuses `wte`.
#[derive(Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    pub wte: Tensor<F>,
    pub wpe: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub ln_f_weight: Tensor<F>,
    pub ln_f_bias: Tensor<F>,
    pub head: Option<TaskHead<F>>,
}

fn normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::cast_from(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Deterministic initialization for `config` from `seed`.
pub fn init_params<F: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<Parameters<F>, TransformerError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden_size;
    let residual_std = INIT_STD / ((2 * config.layers.max(1)) as f64).sqrt();
    let wte = normal(&mut rng, &[config.vocab_size, h], INIT_STD);
    let wpe = normal(&mut rng, &[config.max_sequence, h], INIT_STD);
    let blocks = (0..config.layers)
        .map(|_| Block {
            ln_1_weight: Tensor::full(&[h], F::one()),
            ln_1_bias: Tensor::zeros(&[h]),
            attn_weight: normal(&mut rng, &[h, 3 * h], INIT_STD),
            attn_bias: Tensor::zeros(&[3 * h]),
            attn_proj_weight: normal(&mut rng, &[h, h], residual_std),
            attn_proj_bias: Tensor::zeros(&[h]),
            ln_2_weight: Tensor::full(&[h], F::one()),
            ln_2_bias: Tensor::zeros(&[h]),
            fc_weight: normal(&mut rng, &[h, 4 * h], INIT_STD),
            fc_bias: Tensor::zeros(&[4 * h]),
            mlp_proj_weight: normal(&mut rng, &[4 * h, h], residual_std),
            mlp_proj_bias: Tensor::zeros(&[h]),
        })
        .collect();
    Ok(Parameters {
        config: config.clone(),
        wte,
        wpe,
        blocks,
        ln_f_weight: Tensor::full(&[h], F::one()),
        ln_f_bias: Tensor::zeros(&[h]),
        head: None,
    })
}

impl<F: Scalar> Parameters<F> {
    /// Tensors in canonical order with GPT-2 style names.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("h.{i}.{s}");
            out.extend([
                (p("ln_1.weight"), &b.ln_1_weight),
                (p("ln_1.bias"), &b.ln_1_bias),
                (p("attn.c_attn.weight"), &b.attn_weight),
                (p("attn.c_attn.bias"), &b.attn_bias),
                (p("attn.c_proj.weight"), &b.attn_proj_weight),
                (p("attn.c_proj.bias"), &b.attn_proj_bias),
                (p("ln_2.weight"), &b.ln_2_weight),
                (p("ln_2.bias"), &b.ln_2_bias),
                (p("mlp.c_fc.weight"), &b.fc_weight),
                (p("mlp.c_fc.bias"), &b.fc_bias),
                (p("mlp.c_proj.weight"), &b.mlp_proj_weight),
                (p("mlp.c_proj.bias"), &b.mlp_proj_bias),
            ]);
        }
        out.push(("ln_f.weight".to_string(), &self.ln_f_weight));
        out.push(("ln_f.bias".to_string(), &self.ln_f_bias));
        if let Some(head) = &self.head {
            out.push(("head.weight".to_string(), &head.weight));
            out.push(("head.bias".to_string(), &head.bias));
        }
        out
    }

    /// Same order as [`Parameters::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln_1_weight,
                &mut b.ln_1_bias,
                &mut b.attn_weight,
                &mut b.attn_bias,
                &mut b.attn_proj_weight,
                &mut b.attn_proj_bias,
                &mut b.ln_2_weight,
                &mut b.ln_2_bias,
                &mut b.fc_weight,
                &mut b.fc_bias,
                &mut b.mlp_proj_weight,
                &mut b.mlp_proj_bias,
            ]);
        }
        out.push(&mut self.ln_f_weight);
        out.push(&mut self.ln_f_bias);
        if let Some(head) = &mut self.head {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Total element count, task head included.
    pub fn num_elements(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn head_spec(&self) -> HeadSpec {
        self.head.as_ref().map_or(HeadSpec::LanguageModel, |h| h.spec)
    }

    /// Installs a freshly initialized task head, replacing any existing one.
    /// `LanguageModel` removes the task head.
    pub fn attach_head(&mut self, spec: HeadSpec, seed: u64) -> Result<(), TransformerError> {
        let Some(k) = spec.outputs() else {
            self.head = None;
            return Ok(());
        };
        if k == 0 {
            return Err(TransformerError::Config(
                "classifier needs at least one label".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Some(TaskHead {
            spec,
            weight: normal(&mut rng, &[k, self.config.hidden_size], INIT_STD),
            bias: Tensor::zeros(&[k]),
        });
        Ok(())
    }

    /// Appends `extra` token-embedding rows, each the mean of the existing rows.
    pub fn grow_vocab(&mut self, extra: usize) {
        if extra == 0 {
            return;
        }
        let (v, h) = (self.config.vocab_size, self.config.hidden_size);
        let mut mean = vec![0.0f64; h];
        for r in 0..v {
            for (m, x) in mean.iter_mut().zip(self.wte.row(r)) {
                *m += x.as_f64();
            }
        }
        let mean: Vec<F> = mean.iter().map(|m| F::cast_from(m / v as f64)).collect();
        let mut data = self.wte.data().to_vec();
        for _ in 0..extra {
            data.extend_from_slice(&mean);
        }
        self.config.vocab_size = v + extra;
        self.wte = Tensor::new(vec![v + extra, h], data).expect("shape matches");
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn validate(&self) -> Result<(), TransformerError> {
        self.config.validate()?;
        let expected = expected_shapes(&self.config, self.head.as_ref().map(|h| h.spec));
        let named = self.named();
        if named.len() != expected.len() || self.blocks.len() != self.config.layers {
            return Err(TransformerError::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, t), (ename, shape)) in named.iter().zip(&expected) {
            if name != ename || t.shape() != shape.as_slice() {
                return Err(TransformerError::Config(format!(
                    "tensor {name} has shape {:?}, expected {ename} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            config: self.config.clone(),
            wte: self.wte.cast(),
            wpe: self.wpe.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln_1_weight: b.ln_1_weight.cast(),
                    ln_1_bias: b.ln_1_bias.cast(),
                    attn_weight: b.attn_weight.cast(),
                    attn_bias: b.attn_bias.cast(),
                    attn_proj_weight: b.attn_proj_weight.cast(),
                    attn_proj_bias: b.attn_proj_bias.cast(),
                    ln_2_weight: b.ln_2_weight.cast(),
                    ln_2_bias: b.ln_2_bias.cast(),
                    fc_weight: b.fc_weight.cast(),
                    fc_bias: b.fc_bias.cast(),
                    mlp_proj_weight: b.mlp_proj_weight.cast(),
                    mlp_proj_bias: b.mlp_proj_bias.cast(),
                })
                .collect(),
            ln_f_weight: self.ln_f_weight.cast(),
            ln_f_bias: self.ln_f_bias.cast(),
            head: self.head.as_ref().map(|h| TaskHead {
                spec: h.spec,
                weight: h.weight.cast(),
                bias: h.bias.cast(),
            }),
        }
    }

    /// Rebuilds parameters from named tensors in canonical order.
    pub fn from_named(
        config: ModelConfig,
        head: Option<HeadSpec>,
        tensors: Vec<(String, Tensor<F>)>,
    ) -> Result<Self, TransformerError> {
        config.validate()?;
        let head = head.filter(|h| *h != HeadSpec::LanguageModel);
        let expected = expected_shapes(&config, head);
        if tensors.len() != expected.len() {
            return Err(TransformerError::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, t), (ename, shape)) in tensors.iter().zip(&expected) {
            if name != ename || t.shape() != shape.as_slice() {
                return Err(TransformerError::Config(format!(
                    "tensor {name} {:?} does not match expected {ename} {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let wte = next();
        let wpe = next();
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln_1_weight: next(),
                ln_1_bias: next(),
                attn_weight: next(),
                attn_bias: next(),
                attn_proj_weight: next(),
                attn_proj_bias: next(),
                ln_2_weight: next(),
                ln_2_bias: next(),
                fc_weight: next(),
                fc_bias: next(),
                mlp_proj_weight: next(),
                mlp_proj_bias: next(),
            })
            .collect();
        let ln_f_weight = next();
        let ln_f_bias = next();
        let head = head.map(|spec| TaskHead {
            spec,
            weight: next(),
            bias: next(),
        });
        Ok(Parameters {
            config,
            wte,
            wpe,
            blocks,
            ln_f_weight,
            ln_f_bias,
            head,
        })
    }
}

/// Names and shapes in canonical order.
pub fn expected_shapes(config: &ModelConfig, head: Option<HeadSpec>) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_size;
    let mut out = vec![
        ("wte".to_string(), vec![config.vocab_size, h]),
        ("wpe".to_string(), vec![config.max_sequence, h]),
    ];
    for i in 0..config.layers {
        let p = |s: &str| format!("h.{i}.{s}");
        out.extend([
            (p("ln_1.weight"), vec![h]),
            (p("ln_1.bias"), vec![h]),
            (p("attn.c_attn.weight"), vec![h, 3 * h]),
            (p("attn.c_attn.bias"), vec![3 * h]),
            (p("attn.c_proj.weight"), vec![h, h]),
            (p("attn.c_proj.bias"), vec![h]),
            (p("ln_2.weight"), vec![h]),
            (p("ln_2.bias"), vec![h]),
            (p("mlp.c_fc.weight"), vec![h, 4 * h]),
            (p("mlp.c_fc.bias"), vec![4 * h]),
            (p("mlp.c_proj.weight"), vec![4 * h, h]),
            (p("mlp.c_proj.bias"), vec![h]),
        ]);
    }
    out.push(("ln_f.weight".to_string(), vec![h]));
    out.push(("ln_f.bias".to_string(), vec![h]));
    if let Some(k) = head.and_then(HeadSpec::outputs) {
        out.push(("head.weight".to_string(), vec![k, h]));
        out.push(("head.bias".to_string(), vec![k]));
    }
    out
}

impl<F: Scalar> fmt::Debug for Block<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Block")
            .field("attn_weight", &self.attn_weight)
            .field("fc_weight", &self.fc_weight)
            .finish_non_exhaustive()
    }
}

impl<F: Scalar> fmt::Debug for TaskHead<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskHead")
            .field("spec", &self.spec)
            .field("weight", &self.weight)
            .field("bias", &self.bias)
            .finish()
    }
}

impl<F: Scalar> fmt::Debug for Parameters<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameters")
            .field("config", &self.config)
            .field("elements", &self.num_elements())
            .field("head", &self.head)
            .finish_non_exhaustive()
    }
}
