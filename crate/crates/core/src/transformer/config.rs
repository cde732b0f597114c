use serde::{Deserialize, Serialize};

use super::TransformerError;

/// Decoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub heads: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_sequence: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// The 2.7B-parameter architecture (2560 hidden, 20 heads, 32 layers,
    /// 28896-token vocabulary, 1024 positions).
    pub fn full_scale() -> Self {
        Self {
            hidden_size: 2560,
            heads: 20,
            layers: 32,
            vocab_size: 28_896,
            max_sequence: 1024,
            dropout: 0.0,
        }
    }

    /// Laptop-sized preset used by the tests and the default CLI runs.
    pub fn desk() -> Self {
        Self {
            hidden_size: 64,
            heads: 4,
            layers: 2,
            vocab_size: 512,
            max_sequence: 128,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.heads
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_sequence", self.max_sequence),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TransformerError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.heads != 0 {
            return Err(TransformerError::Config(format!(
                "hidden_size {} is not divisible by heads {}",
                self.hidden_size, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TransformerError::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Closed-form parameter count with the output head tied to the token
/// embedding: `VH + TH + L(12H^2 + 13H) + 2H`.
pub fn count_params(config: &ModelConfig) -> u64 {
    let h = config.hidden_size as u64;
    let v = config.vocab_size as u64;
    let t = config.max_sequence as u64;
    let l = config.layers as u64;
    v * h + t * h + l * (12 * h * h + 13 * h) + 2 * h
}
