//! JSON model file.
//!
//! ```text
//! { "version": 1,
//!   "config":   { ...TokenizerTrainConfig... },
//!   "vocab":    { "<escaped token>": id, ... },   // in id order
//!   "merges":   [ ["<left>", "<right>"], ... ],   // in rank order
//!   "specials": [ "<|endoftext|>", ... ] }
//! ```
//!
//! Token texts are escaped byte strings: valid UTF-8 is kept as is except
//! `\` (written `\\`) and control characters, which like every byte that is
//! not part of a valid UTF-8 sequence are written `\xNN`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::model::{TokenId, TokenizerModel};
use super::{TokenizerError, TokenizerTrainConfig};

pub const FORMAT_VERSION: u32 = 1;

pub fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\\' => out.push_str("\\\\"),
                c if c.is_control() && (c as u32) < 0x80 => {
                    let _ = write!(out, "\\x{:02x}", c as u32);
                }
                c if c.is_control() => {
                    let mut buf = [0u8; 4];
                    for b in c.encode_utf8(&mut buf).bytes() {
                        let _ = write!(out, "\\x{b:02x}");
                    }
                }
                c => out.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
    out
}

pub fn unescape_bytes(text: &str) -> Result<Vec<u8>, TokenizerError> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(b'x') if i + 4 <= bytes.len() => {
                let hex = std::str::from_utf8(&bytes[i + 2..i + 4])
                    .map_err(|_| TokenizerError::Format(format!("bad escape in {text:?}")))?;
                let b = u8::from_str_radix(hex, 16)
                    .map_err(|_| TokenizerError::Format(format!("bad escape in {text:?}")))?;
                out.push(b);
                i += 4;
            }
            _ => return Err(TokenizerError::Format(format!("bad escape in {text:?}"))),
        }
    }
    Ok(out)
}

struct VocabInIdOrder<'a>(&'a [Vec<u8>]);

impl Serialize for VocabInIdOrder<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (id, bytes) in self.0.iter().enumerate() {
            map.serialize_entry(&escape_bytes(bytes), &id)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct FileOut<'a> {
    version: u32,
    config: &'a TokenizerTrainConfig,
    vocab: VocabInIdOrder<'a>,
    merges: Vec<[String; 2]>,
    specials: Vec<String>,
}

#[derive(Deserialize)]
struct FileIn {
    version: u32,
    config: TokenizerTrainConfig,
    vocab: serde_json::Map<String, serde_json::Value>,
    merges: Vec<[String; 2]>,
    specials: Vec<String>,
}

impl TokenizerModel {
    /// Serialized model document. Deterministic for a given model.
    pub fn to_json(&self) -> String {
        let tokens = self.tokens();
        let file = FileOut {
            version: FORMAT_VERSION,
            config: self.config(),
            vocab: VocabInIdOrder(tokens),
            merges: self
                .merge_pairs()
                .iter()
                .map(|&(l, r)| {
                    [
                        escape_bytes(&tokens[l as usize]),
                        escape_bytes(&tokens[r as usize]),
                    ]
                })
                .collect(),
            specials: self
                .special_ids()
                .iter()
                .map(|&id| escape_bytes(&tokens[id as usize]))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    /// Parses and validates a model document.
    ///
    /// The vocabulary is rebuilt by replaying the merges; the stored `vocab`
    /// table must agree with the replay id for id.
    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: FileIn =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(TokenizerError::Format(format!(
                "unsupported tokenizer version {}",
                file.version
            )));
        }
        let mut base_config = file.config.clone();
        let specials = file
            .specials
            .iter()
            .map(|s| unescape_bytes(s).and_then(utf8))
            .collect::<Result<Vec<_>, _>>()?;
        // specials registered at training time hold ids 256.. in order; any
        // added later sit after the merged tokens
        let trained_specials = specials
            .iter()
            .enumerate()
            .take_while(|(i, s)| {
                file.vocab.get(&escape_bytes(s.as_bytes())).and_then(|v| v.as_u64())
                    == Some(256 + *i as u64)
            })
            .count();
        base_config.special_tokens = specials[..trained_specials].to_vec();
        let merges = file
            .merges
            .iter()
            .map(|[l, r]| Ok((unescape_bytes(l)?, unescape_bytes(r)?)))
            .collect::<Result<Vec<_>, TokenizerError>>()?;
        let mut model = Self::from_merges(base_config, &merges)?;
        let late: Vec<&str> = specials[trained_specials..]
            .iter()
            .map(String::as_str)
            .collect();
        model.add_special_tokens(&late)?;
        if model.config() != &file.config {
            return Err(TokenizerError::Format(
                "special tokens do not match config".into(),
            ));
        }

        if file.vocab.len() != model.vocab_size() {
            return Err(TokenizerError::Format(format!(
                "vocab lists {} tokens but merges produce {}",
                file.vocab.len(),
                model.vocab_size()
            )));
        }
        for (text, id) in &file.vocab {
            let id = id
                .as_u64()
                .ok_or_else(|| TokenizerError::Format(format!("non-integer id for {text:?}")))?;
            let bytes = unescape_bytes(text)?;
            if model.id_of(&bytes) != Some(id as TokenId) {
                return Err(TokenizerError::Format(format!(
                    "token {text:?} has id {id} but replay assigns {:?}",
                    model.id_of(&bytes)
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn utf8(bytes: Vec<u8>) -> Result<String, TokenizerError> {
    String::from_utf8(bytes).map_err(|_| TokenizerError::Format("special token is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn escapes_are_readable() {
        assert_eq!(escape_bytes(b"ab c"), "ab c");
        assert_eq!(escape_bytes(b"\\"), "\\\\");
        assert_eq!(escape_bytes(&[0xff, b'a']), "\\xffa");
        assert_eq!(escape_bytes(b"\n"), "\\x0a");
        assert_eq!(escape_bytes("é".as_bytes()), "é");
        assert_eq!(escape_bytes(&"é".as_bytes()[..1]), "\\xc3");
    }

    proptest! {
        #[test]
        fn escape_roundtrips(bytes in proptest::collection::vec(any::<u8>(), 0..32)) {
            prop_assert_eq!(unescape_bytes(&escape_bytes(&bytes)).unwrap(), bytes);
        }
    }

    #[test]
    fn model_file_roundtrips_with_late_specials() {
        let cfg = TokenizerTrainConfig {
            vocab_size: 300,
            min_frequency: 1,
            ..Default::default()
        };
        let mut m = crate::tokenizer::train_tokenizer(vec!["ab ab \u{ff} abc\\"], &cfg).unwrap();
        m.add_special_tokens(&["[CTX]", "[ANS]"]).unwrap();
        let json = m.to_json();
        let back = TokenizerModel::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json);
        assert_eq!(back.special_id("[ANS]"), m.special_id("[ANS]"));
    }

    #[test]
    fn tampered_vocab_is_rejected() {
        let m = TokenizerModel::byte_level(TokenizerTrainConfig {
            vocab_size: 300,
            ..Default::default()
        })
        .unwrap();
        let json = m.to_json().replace("\"a\": 97", "\"a\": 98");
        assert!(matches!(
            TokenizerModel::from_json(&json),
            Err(TokenizerError::Format(_))
        ));
    }
}
