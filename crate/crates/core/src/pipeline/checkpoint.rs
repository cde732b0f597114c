//! Binary checkpoint file.
//!
//! ```text
//! "BMLM" | version u32 LE | manifest length u64 LE | manifest (UTF-8 JSON)
//!        | tensor payloads (LE, row-major, in manifest order)
//!        | content hash (first 8 bytes of SHA-256 over everything before it)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Precision, Scalar, Tensor};
use crate::optimizer::AdamWState;
use crate::transformer::{HeadSpec, ModelConfig, Parameters, PromptTokens};

use super::PrecisionPolicy;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BMLM";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8;
const HASH_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub step: u64,
    pub loss: f64,
}

/// What a fine-tuned checkpoint was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: String,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub prompt_tokens: Option<PromptTokens>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub params: Parameters<F>,
    pub optimizer: Option<AdamWState<F>>,
    pub step: u64,
    pub precision: PrecisionPolicy,
    pub tokenizer_hash: Option<String>,
    pub loss_curve: Vec<LossSample>,
    pub task: Option<TaskMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    precision: Precision,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    head: HeadSpec,
    precision_policy: PrecisionPolicy,
    tokenizer_hash: Option<String>,
    step: u64,
    optimizer_step: Option<u64>,
    task: Option<TaskMeta>,
    loss_curve: Vec<LossSample>,
    tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "optimizer.m_hat.";
const V_PREFIX: &str = "optimizer.v_hat.";

fn hash8(bytes: &[u8]) -> [u8; HASH_LEN] {
    let digest = Sha256::digest(bytes);
    digest[..HASH_LEN].try_into().expect("8 bytes")
}

impl<F: Scalar> Checkpoint<F> {
    /// Step-zero checkpoint with no optimizer state.
    pub fn fresh(params: Parameters<F>) -> Self {
        Self {
            params,
            optimizer: None,
            step: 0,
            precision: PrecisionPolicy::full(F::PRECISION.label()),
            tokenizer_hash: None,
            loss_curve: Vec::new(),
            task: None,
        }
    }

    fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.params.named();
        if let Some(opt) = &self.optimizer {
            let names = self.params.names();
            for (n, t) in names.iter().zip(&opt.m_hat) {
                out.push((format!("{M_PREFIX}{n}"), t));
            }
            for (n, t) in names.iter().zip(&opt.v_hat) {
                out.push((format!("{V_PREFIX}{n}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let width = F::PRECISION.byte_width() as u64;
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    precision: F::PRECISION,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() as u64 * width;
                e
            })
            .collect();
        let manifest = Manifest {
            config: self.params.config.clone(),
            head: self.params.head_spec(),
            precision_policy: self.precision.clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            task: self.task.clone(),
            loss_curve: self.loss_curve.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize + HASH_LEN);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        let h = hash8(&out);
        out.extend_from_slice(&h);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER_LEN + HASH_LEN {
            return Err(CheckpointError::Integrity(format!(
                "file of {} bytes is too short",
                bytes.len()
            )));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Integrity("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
        if hash8(body) != stored {
            return Err(CheckpointError::Integrity("content hash mismatch".into()));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN
            .checked_add(mlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CheckpointError::Integrity("manifest runs past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&body[HEADER_LEN..payload_start])
            .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
        let payload = &body[payload_start..];

        let width = F::PRECISION.byte_width();
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.precision != F::PRECISION {
                return Err(CheckpointError::Format(format!(
                    "tensor {} is {} but {} was requested",
                    e.name,
                    e.precision.label(),
                    F::PRECISION.label()
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * width;
            if start != expected_offset || end > payload.len() {
                return Err(CheckpointError::Integrity(format!(
                    "tensor {} payload out of place",
                    e.name
                )));
            }
            let data = payload[start..end].chunks_exact(width).map(F::read_le).collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| CheckpointError::Format(format!("{}: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(CheckpointError::Integrity("trailing payload bytes".into()));
        }

        let split_at = tensors
            .iter()
            .position(|(n, _)| n.starts_with(M_PREFIX))
            .unwrap_or(tensors.len());
        let opt_tensors = tensors.split_off(split_at);
        let params = Parameters::from_named(manifest.config, Some(manifest.head), tensors)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let optimizer = match manifest.optimizer_step {
            None if opt_tensors.is_empty() => None,
            Some(step) => {
                let names = params.names();
                if opt_tensors.len() != 2 * names.len() {
                    return Err(CheckpointError::Format(
                        "optimizer moments do not mirror the parameters".into(),
                    ));
                }
                let mut m_hat = Vec::with_capacity(names.len());
                let mut v_hat = Vec::with_capacity(names.len());
                for (i, (name, t)) in opt_tensors.into_iter().enumerate() {
                    let (prefix, list, j) = if i < names.len() {
                        (M_PREFIX, &mut m_hat, i)
                    } else {
                        (V_PREFIX, &mut v_hat, i - names.len())
                    };
                    let own = params.named()[j].1.shape().to_vec();
                    if name != format!("{prefix}{}", names[j]) || t.shape() != own.as_slice() {
                        return Err(CheckpointError::Format(format!(
                            "unexpected optimizer tensor {name}"
                        )));
                    }
                    list.push(t);
                }
                Some(AdamWState { step, m_hat, v_hat })
            }
            None => {
                return Err(CheckpointError::Format(
                    "optimizer tensors present without a step counter".into(),
                ))
            }
        };
        Ok(Self {
            params,
            optimizer,
            step: manifest.step,
            precision: manifest.precision_policy,
            tokenizer_hash: manifest.tokenizer_hash,
            loss_curve: manifest.loss_curve,
            task: manifest.task,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex of the trailing content hash.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        bytes[bytes.len() - HASH_LEN..]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Bitwise equality of every tensor and counter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
            && self.step == other.step
            && self.optimizer.as_ref().map(|o| o.step) == other.optimizer.as_ref().map(|o| o.step)
            && self.params.config == other.params.config
            && self.params.head_spec() == other.params.head_spec()
            && self.loss_curve.len() == other.loss_curve.len()
            && self
                .loss_curve
                .iter()
                .zip(&other.loss_curve)
                .all(|(x, y)| x.step == y.step && x.loss.to_bits() == y.loss.to_bits())
    }
}
