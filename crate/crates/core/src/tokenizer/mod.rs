//! Byte-level BPE tokenizer: training, encoding, decoding and a model file
//! format, plus a fragmentation report comparing two tokenizers.
//!
//! The base alphabet is the 256 single bytes, so every input is encodable and
//! `decode(encode(x)) == x`. Special tokens are atomic: text is split on their
//! literals before pre-tokenization, and no merge may produce one.

mod compare;
mod format;
mod model;
mod pretokenize;
mod train;

pub use compare::{compare_tokenizers, FragmentationReport, FragmentationRow};
pub use format::{escape_bytes, unescape_bytes, FORMAT_VERSION};
pub use model::{Encoding, MergeRule, TokenId, TokenizerModel};
pub use pretokenize::{pretokenize, PreToken};
pub use train::{read_corpus, train_tokenizer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Document separator registered by default.
pub const END_OF_TEXT: &str = "<|endoftext|>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    Config(String),
    #[error("unreadable corpus: {0}")]
    Input(String),
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("malformed tokenizer file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training settings. Defaults give the full-size domain vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerTrainConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
    pub add_prefix_space: bool,
    pub trim_offsets: bool,
    pub special_tokens: Vec<String>,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            vocab_size: 28_896,
            min_frequency: 2,
            add_prefix_space: false,
            trim_offsets: true,
            special_tokens: vec![END_OF_TEXT.to_string()],
        }
    }
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        let floor = 256 + self.special_tokens.len();
        if self.vocab_size < floor {
            return Err(TokenizerError::Config(format!(
                "vocab_size {} leaves no room for 256 bytes and {} special tokens",
                self.vocab_size,
                self.special_tokens.len()
            )));
        }
        if self.min_frequency < 1 {
            return Err(TokenizerError::Config("min_frequency must be >= 1".into()));
        }
        for (i, s) in self.special_tokens.iter().enumerate() {
            if s.len() < 2 {
                return Err(TokenizerError::Config(format!(
                    "special token {s:?} must be at least 2 bytes"
                )));
            }
            if self.special_tokens[..i].contains(s) {
                return Err(TokenizerError::Config(format!(
                    "duplicate special token {s:?}"
                )));
            }
        }
        Ok(())
    }
}
