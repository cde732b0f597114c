use rand::Rng;

use crate::autodiff::{Scalar, Tape, Tensor, Var};

use super::{HeadSpec, Parameters, TransformerError};

/// A padded batch of token rows. `mask` marks real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub seq: usize,
}

impl Batch {
    /// Right-pads `rows` with `pad_id` to the longest row.
    pub fn padded<R: AsRef<[u32]>>(rows: &[R], pad_id: u32) -> Result<Self, TransformerError> {
        let seq = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(TransformerError::Contract("batch has no tokens".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut mask = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            let r = r.as_ref();
            ids.extend(r.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat(pad_id as usize).take(seq - r.len()));
            mask.extend(std::iter::repeat(true).take(r.len()));
            mask.extend(std::iter::repeat(false).take(seq - r.len()));
        }
        Ok(Self {
            ids,
            mask,
            rows: rows.len(),
            seq,
        })
    }

    /// Explicit ids and mask, both `[rows * seq]`.
    pub fn with_mask(
        ids: Vec<usize>,
        mask: Vec<bool>,
        rows: usize,
        seq: usize,
    ) -> Result<Self, TransformerError> {
        if ids.len() != rows * seq || mask.len() != rows * seq || rows == 0 || seq == 0 {
            return Err(TransformerError::Contract(format!(
                "batch of {} ids / {} mask entries does not fill {rows}x{seq}",
                ids.len(),
                mask.len()
            )));
        }
        Ok(Self {
            ids,
            mask,
            rows,
            seq,
        })
    }

    /// Index of the last real position of each row, in flattened coordinates.
    pub fn last_real(&self) -> Result<Vec<usize>, TransformerError> {
        (0..self.rows)
            .map(|b| {
                let row = &self.mask[b * self.seq..(b + 1) * self.seq];
                row.iter()
                    .rposition(|&m| m)
                    .map(|j| b * self.seq + j)
                    .ok_or_else(|| {
                        TransformerError::Contract(format!("row {b} has no real positions"))
                    })
            })
            .collect()
    }
}

pub struct BoundBlock {
    ln_1: (Var, Var),
    attn: (Var, Var),
    attn_proj: (Var, Var),
    ln_2: (Var, Var),
    fc: (Var, Var),
    mlp_proj: (Var, Var),
}

/// Parameters recorded on a tape, in the order of [`Parameters::named`].
pub struct Bound {
    pub vars: Vec<Var>,
    wte: Var,
    wpe: Var,
    blocks: Vec<BoundBlock>,
    ln_f: (Var, Var),
    head: Option<(Var, Var)>,
}

impl<F: Scalar> Parameters<F> {
    /// Copies every tensor onto `tape`, as trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let mut vars = Vec::new();
        let mut put = |t: &Tensor<F>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            v
        };
        let wte = put(&self.wte);
        let wpe = put(&self.wpe);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln_1: (put(&b.ln_1_weight), put(&b.ln_1_bias)),
                attn: (put(&b.attn_weight), put(&b.attn_bias)),
                attn_proj: (put(&b.attn_proj_weight), put(&b.attn_proj_bias)),
                ln_2: (put(&b.ln_2_weight), put(&b.ln_2_bias)),
                fc: (put(&b.fc_weight), put(&b.fc_bias)),
                mlp_proj: (put(&b.mlp_proj_weight), put(&b.mlp_proj_bias)),
            })
            .collect();
        let ln_f = (put(&self.ln_f_weight), put(&self.ln_f_bias));
        let head = self.head.as_ref().map(|h| (put(&h.weight), put(&h.bias)));
        Bound {
            vars,
            wte,
            wpe,
            blocks,
            ln_f,
            head,
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), TransformerError> {
        let cfg = &self.config;
        if batch.seq > cfg.max_sequence {
            return Err(TransformerError::Contract(format!(
                "sequence length {} exceeds the context window {}",
                batch.seq, cfg.max_sequence
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(TransformerError::Domain(format!(
                "token id {bad} is outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }
        batch.last_real().map(|_| ())
    }

    /// Final-norm hidden states `[rows * seq, H]`. Dropout applies only when
    /// an RNG is supplied and the configured rate is positive.
    pub fn hidden_states<R: Rng>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        batch: &Batch,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var, TransformerError> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let rate = cfg.dropout;
        let mut drop = |tape: &mut Tape<F>, x: Var| match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
            _ => x,
        };
        let positions: Vec<usize> = (0..batch.rows).flat_map(|_| 0..batch.seq).collect();
        let tok = tape.embed_gather(bound.wte, &batch.ids)?;
        let pos = tape.embed_gather(bound.wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = drop(tape, x);
        for b in &bound.blocks {
            let n = tape.layer_norm(x, b.ln_1.0, b.ln_1.1)?;
            let qkv = tape.matmul(n, b.attn.0)?;
            let qkv = tape.add_broadcast(qkv, b.attn.1)?;
            let a = tape.causal_attention(qkv, cfg.heads, batch.rows, batch.seq, &batch.mask)?;
            let a = tape.matmul(a, b.attn_proj.0)?;
            let a = tape.add_broadcast(a, b.attn_proj.1)?;
            let a = drop(tape, a);
            x = tape.add(x, a)?;
            let n = tape.layer_norm(x, b.ln_2.0, b.ln_2.1)?;
            let m = tape.matmul(n, b.fc.0)?;
            let m = tape.add_broadcast(m, b.fc.1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, b.mlp_proj.0)?;
            let m = tape.add_broadcast(m, b.mlp_proj.1)?;
            let m = drop(tape, m);
            x = tape.add(x, m)?;
        }
        Ok(tape.layer_norm(x, bound.ln_f.0, bound.ln_f.1)?)
    }

    /// Tied language-model logits `[N, V]` for hidden rows `[N, H]`.
    pub fn lm_logits(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        hidden: Var,
    ) -> Result<Var, TransformerError> {
        Ok(tape.matmul_nt(hidden, bound.wte)?)
    }

    /// Task-head scores `[rows, k]` read at each row's last real position.
    pub fn head_scores(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        hidden: Var,
        batch: &Batch,
    ) -> Result<Var, TransformerError> {
        let (w, b) = bound
            .head
            .ok_or_else(|| TransformerError::Contract("model has no task head".into()))?;
        let last = tape.gather_rows(hidden, &batch.last_real()?)?;
        let scores = tape.matmul_nt(last, w)?;
        Ok(tape.add_broadcast(scores, b)?)
    }

    /// Inference forward pass. Returns `[rows, seq, V]` for the language
    /// model, otherwise `[rows, k]`.
    pub fn forward(&self, batch: &Batch, head: HeadSpec) -> Result<Tensor<F>, TransformerError> {
        if head != HeadSpec::LanguageModel && head != self.head_spec() {
            return Err(TransformerError::Contract(format!(
                "requested head {head:?} but the model carries {:?}",
                self.head_spec()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let hidden = self.hidden_states::<rand::rngs::ThreadRng>(&mut tape, &bound, batch, None)?;
        let out = match head {
            HeadSpec::LanguageModel => {
                let logits = self.lm_logits(&mut tape, &bound, hidden)?;
                tape.reshape(logits, &[batch.rows, batch.seq, self.config.vocab_size])?
            }
            _ => self.head_scores(&mut tape, &bound, hidden, batch)?,
        };
        Ok(tape.value(out).clone())
    }
}
