use std::collections::HashMap;
use std::ops::Range;

use super::pretokenize::{pretokenize, split_specials, Segment};
use super::{TokenizerError, TokenizerTrainConfig};

pub type TokenId = u32;

/// A learned merge: `left` followed by `right` becomes one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub left: Vec<u8>,
    pub right: Vec<u8>,
    pub rank: usize,
}

/// Token ids with per-token byte offsets into the source text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub offsets: Vec<Range<usize>>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct MergeTarget {
    rank: usize,
    out: TokenId,
}

/// Immutable byte-level BPE model.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    config: TokenizerTrainConfig,
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    merge_index: HashMap<(TokenId, TokenId), MergeTarget>,
    // ids of special tokens, in registration order
    specials: Vec<TokenId>,
    special_bytes: Vec<Vec<u8>>,
}

impl TokenizerModel {
    /// Byte alphabet plus the configured special tokens, no merges.
    pub fn byte_level(config: TokenizerTrainConfig) -> Result<Self, TokenizerError> {
        config.validate()?;
        let mut model = Self {
            config: config.clone(),
            tokens: Vec::new(),
            index: HashMap::new(),
            merges: Vec::new(),
            merge_index: HashMap::new(),
            specials: Vec::new(),
            special_bytes: Vec::new(),
        };
        for b in 0..=255u8 {
            model.insert_token(vec![b]);
        }
        for s in &config.special_tokens {
            model.register_special(s.as_bytes())?;
        }
        Ok(model)
    }

    /// Builds a model by replaying `merges` in rank order on top of the
    /// byte alphabet and the configured specials.
    pub fn from_merges(
        config: TokenizerTrainConfig,
        merges: &[(Vec<u8>, Vec<u8>)],
    ) -> Result<Self, TokenizerError> {
        let mut model = Self::byte_level(config)?;
        for (left, right) in merges {
            let l = model.id_of(left).ok_or_else(|| {
                TokenizerError::Format(format!(
                    "merge references unknown token {:?}",
                    String::from_utf8_lossy(left)
                ))
            })?;
            let r = model.id_of(right).ok_or_else(|| {
                TokenizerError::Format(format!(
                    "merge references unknown token {:?}",
                    String::from_utf8_lossy(right)
                ))
            })?;
            model.push_merge(l, r)?;
        }
        Ok(model)
    }

    fn insert_token(&mut self, bytes: Vec<u8>) -> TokenId {
        if let Some(&id) = self.index.get(&bytes) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.index.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    fn register_special(&mut self, bytes: &[u8]) -> Result<TokenId, TokenizerError> {
        if bytes.len() < 2 {
            return Err(TokenizerError::Config(format!(
                "special token {:?} must be at least 2 bytes",
                String::from_utf8_lossy(bytes)
            )));
        }
        if let Some(&id) = self.index.get(bytes) {
            if self.specials.contains(&id) {
                return Ok(id);
            }
            return Err(TokenizerError::Config(format!(
                "special token {:?} collides with an ordinary token",
                String::from_utf8_lossy(bytes)
            )));
        }
        let id = self.insert_token(bytes.to_vec());
        self.specials.push(id);
        self.special_bytes.push(bytes.to_vec());
        Ok(id)
    }

    /// Appends a merge of two existing tokens, returning the output id.
    pub(crate) fn push_merge(
        &mut self,
        left: TokenId,
        right: TokenId,
    ) -> Result<TokenId, TokenizerError> {
        if self.merge_index.contains_key(&(left, right)) {
            return Err(TokenizerError::Format("duplicate merge rule".into()));
        }
        if self.is_special(left) || self.is_special(right) {
            return Err(TokenizerError::Format(
                "merge rules may not involve special tokens".into(),
            ));
        }
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        if self.special_bytes.contains(&bytes) {
            return Err(TokenizerError::Format(
                "merge rule would produce a special token".into(),
            ));
        }
        let out = self.insert_token(bytes);
        let rank = self.merges.len();
        self.merges.push((left, right));
        self.merge_index.insert((left, right), MergeTarget { rank, out });
        Ok(out)
    }

    /// Registers extra special tokens after training, e.g. prompt markers
    /// used by a fine-tuning format. Already-registered literals keep their ids.
    pub fn add_special_tokens(&mut self, literals: &[&str]) -> Result<Vec<TokenId>, TokenizerError> {
        let mut ids = Vec::with_capacity(literals.len());
        for lit in literals {
            let was_new = self.id_of(lit.as_bytes()).is_none();
            let id = self.register_special(lit.as_bytes())?;
            if was_new {
                self.config.special_tokens.push(lit.to_string());
            }
            ids.push(id);
        }
        self.config.vocab_size = self.config.vocab_size.max(self.tokens.len());
        Ok(ids)
    }

    pub fn config(&self) -> &TokenizerTrainConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.index.get(bytes).copied()
    }

    pub fn special_id(&self, literal: &str) -> Option<TokenId> {
        self.id_of(literal.as_bytes()).filter(|id| self.is_special(*id))
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.contains(&id)
    }

    pub fn special_ids(&self) -> &[TokenId] {
        &self.specials
    }

    /// Merge rules in rank order, as token texts.
    pub fn merges(&self) -> Vec<MergeRule> {
        self.merges
            .iter()
            .enumerate()
            .map(|(rank, &(l, r))| MergeRule {
                left: self.tokens[l as usize].clone(),
                right: self.tokens[r as usize].clone(),
                rank,
            })
            .collect()
    }

    pub(crate) fn merge_output(&self, pair: (TokenId, TokenId)) -> Option<TokenId> {
        self.merge_index.get(&pair).map(|t| t.out)
    }

    pub(crate) fn merge_pairs(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub(crate) fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    /// Applies merges to one pre-token, lowest rank first.
    pub(crate) fn bpe(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut symbols: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_index.get(&(w[0], w[1])).map(|t| (t.rank, w[0], w[1], t.out)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, l, r, out)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == l && symbols[i + 1] == r {
                    merged.push(out);
                    i += 2;
                } else {
                    merged.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    pub fn encode(&self, text: &str) -> Encoding {
        self.encode_bytes(text.as_bytes())
    }

    /// Encodes arbitrary bytes. Never fails: unmerged bytes stay byte tokens.
    pub fn encode_bytes(&self, text: &[u8]) -> Encoding {
        self.encode_with(text, true)
    }

    /// Like [`encode`](Self::encode) but special-token literals in `text`
    /// are encoded as ordinary bytes.
    pub fn encode_ordinary(&self, text: &str) -> Encoding {
        self.encode_with(text.as_bytes(), false)
    }

    fn encode_with(&self, text: &[u8], specials: bool) -> Encoding {
        let mut enc = Encoding::default();
        if text.is_empty() {
            return enc;
        }
        let segments = if specials {
            split_specials(text, &self.special_bytes)
        } else {
            vec![Segment::Text(0..text.len())]
        };
        let prefix = self.config.add_prefix_space
            && matches!(segments.first(), Some(Segment::Text(r)) if r.start == 0);
        for (si, seg) in segments.iter().enumerate() {
            match seg {
                Segment::Special { range, index } => {
                    enc.ids.push(self.specials[*index]);
                    enc.offsets.push(range.clone());
                }
                Segment::Text(range) => {
                    let piece = &text[range.clone()];
                    if si == 0 && prefix {
                        let mut spaced = Vec::with_capacity(piece.len() + 1);
                        spaced.push(b' ');
                        spaced.extend_from_slice(piece);
                        // virtual offsets shift back by one into the source
                        self.encode_plain(&spaced, 0, true, &mut enc);
                    } else {
                        self.encode_plain(piece, range.start, false, &mut enc);
                    }
                }
            }
        }
        enc
    }

    fn encode_plain(&self, bytes: &[u8], base: usize, synthetic_space: bool, enc: &mut Encoding) {
        let to_source = |v: usize| -> usize {
            if synthetic_space {
                base + v.saturating_sub(1)
            } else {
                base + v
            }
        };
        for pre in pretokenize(bytes) {
            let ids = self.bpe(&bytes[pre.range.clone()]);
            let mut pos = pre.range.start;
            for (k, id) in ids.into_iter().enumerate() {
                let len = self.tokens[id as usize].len();
                let mut start = pos;
                let end = pos + len;
                let leading_space = pre.attached_space || (synthetic_space && pre.range.start == 0);
                if k == 0 && leading_space && self.config.trim_offsets {
                    start += 1;
                }
                enc.ids.push(id);
                enc.offsets.push(to_source(start).max(base)..to_source(end).max(base));
                pos = end;
            }
        }
    }

    /// Concatenated bytes of `ids`.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(TokenizerError::UnknownId(id))?;
            out.extend_from_slice(bytes);
        }
        if self.config.add_prefix_space && out.first() == Some(&b' ') {
            out.remove(0);
        }
        Ok(out)
    }

    /// Decodes to text. Invalid UTF-8 (possible for arbitrary id sequences)
    /// is replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Printable form of one token, with non-UTF-8 bytes escaped.
    pub fn token_text(&self, id: TokenId) -> Option<String> {
        self.token_bytes(id).map(super::escape_bytes)
    }
}
