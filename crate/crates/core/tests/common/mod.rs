//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

pub mod checks;

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A merge adopted by the brute-force trainer, with the pair count it had.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleMerge {
    pub left: Vec<u8>,
    pub right: Vec<u8>,
    pub count: u64,
}

fn is_space(b: u8) -> bool {
    b == b' ' || (b'\t'..=b'\r').contains(&b)
}

/// Splits a document on special literals (leftmost, then longest).
fn strip_specials(doc: &[u8], specials: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut i = 0;
    'outer: while i < doc.len() {
        let mut best: Option<usize> = None;
        for s in specials {
            if doc[i..].starts_with(s) && best.map_or(true, |b| s.len() > b) {
                best = Some(s.len());
            }
        }
        if let Some(len) = best {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            i += len;
            continue 'outer;
        }
        cur.push(doc[i]);
        i += 1;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word split: runs of space / non-space bytes, where a whitespace run that
/// ends in ' ' and is followed by a word donates that space to the word.
fn words_of(text: &[u8]) -> Vec<Vec<u8>> {
    let mut runs: Vec<Vec<u8>> = Vec::new();
    for &b in text {
        match runs.last_mut() {
            Some(run) if is_space(run[0]) == is_space(b) => run.push(b),
            _ => runs.push(vec![b]),
        }
    }
    let mut out: Vec<Vec<u8>> = Vec::new();
    let mut carry: Option<u8> = None;
    for (i, run) in runs.iter().enumerate() {
        if is_space(run[0]) {
            let next_is_word = i + 1 < runs.len();
            if next_is_word && *run.last().unwrap() == b' ' {
                if run.len() > 1 {
                    out.push(run[..run.len() - 1].to_vec());
                }
                carry = Some(b' ');
            } else {
                out.push(run.clone());
            }
        } else {
            let mut w = Vec::new();
            if let Some(c) = carry.take() {
                w.push(c);
            }
            w.extend_from_slice(run);
            out.push(w);
        }
    }
    out
}

/// Reference BPE trainer that recounts every adjacent pair each iteration.
pub fn bpe_oracle(
    docs: &[String],
    vocab_size: usize,
    min_frequency: u64,
    specials: &[String],
) -> Vec<OracleMerge> {
    let special_bytes: Vec<Vec<u8>> = specials.iter().map(|s| s.as_bytes().to_vec()).collect();
    let mut words: Vec<Vec<Vec<u8>>> = Vec::new();
    for doc in docs {
        for piece in strip_specials(doc.as_bytes(), &special_bytes) {
            for w in words_of(&piece) {
                words.push(w.iter().map(|&b| vec![b]).collect());
            }
        }
    }
    let mut vocab: HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    vocab.extend(special_bytes.iter().cloned());
    let mut adopted: HashSet<(Vec<u8>, Vec<u8>)> = HashSet::new();
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut counts: BTreeMap<(Vec<u8>, Vec<u8>), u64> = BTreeMap::new();
        for w in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0].clone(), pair[1].clone())).or_insert(0) += 1;
            }
        }
        counts.retain(|(l, r), _| !special_bytes.contains(&[l.clone(), r.clone()].concat()));
        let mut best: Option<(&(Vec<u8>, Vec<u8>), u64)> = None;
        for (pair, &c) in &counts {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < min_frequency {
            break;
        }
        let pair = pair.clone();
        let merged = [pair.0.clone(), pair.1.clone()].concat();
        if adopted.insert(pair.clone()) {
            merges.push(OracleMerge {
                left: pair.0.clone(),
                right: pair.1.clone(),
                count,
            });
            vocab.insert(merged.clone());
        }
        for w in &mut words {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *w = out;
        }
    }
    merges
}

/// Random small corpus: a few documents totalling at most `max_bytes`.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_bytes: usize) -> Vec<String> {
    const ALPHABET: &[&str] = &["a", "b", "c", "d", " ", " ", "\n", "é", "<|endoftext|>"];
    let docs = rng.gen_range(1..=4);
    let mut out = Vec::new();
    let mut budget = rng.gen_range(0..=max_bytes);
    for _ in 0..docs {
        let mut doc = String::new();
        loop {
            let piece = ALPHABET[rng.gen_range(0..ALPHABET.len())];
            if piece.len() > budget {
                break;
            }
            budget -= piece.len();
            doc.push_str(piece);
            if rng.gen_bool(0.02) {
                break;
            }
        }
        out.push(doc);
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Norm-wise relative error `|a - n| / max(|a| + |n|, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// AdamW on one scalar, written out as the plain recurrence.
pub fn adamw_scalar_oracle(
    p0: f64,
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0f64, 0.0f64);
    let mut out = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powi(t));
        let v_hat = v / (1.0 - beta2.powi(t));
        p = p * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
        out.push(p);
    }
    out
}

use medlm_core::transformer::Parameters;

fn ref_layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / denom * g + b)
        .collect()
}

/// `x [H_in] · w [H_in, H_out] + b`, with `w` stored row-major.
fn ref_affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

fn ref_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Final-norm hidden states of one unpadded sequence, computed with
/// explicit loops and no tape.
pub fn reference_hidden(p: &Parameters<f64>, ids: &[usize]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let h = cfg.hidden_size;
    let d = h / cfg.heads;
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..h)
                .map(|k| p.wte.data()[id * h + k] + p.wpe.data()[t * h + k])
                .collect()
        })
        .collect();
    for blk in &p.blocks {
        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                let n = ref_layer_norm(x, blk.ln_1_weight.data(), blk.ln_1_bias.data());
                ref_affine(&n, blk.attn_weight.data(), blk.attn_bias.data())
            })
            .collect();
        for i in 0..xs.len() {
            let mut att = vec![0.0; h];
            for head in 0..cfg.heads {
                let q = &qkv[i][head * d..(head + 1) * d];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][h + head * d..h + (head + 1) * d];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for t in 0..d {
                        att[head * d + t] += e / z * qkv[j][2 * h + head * d + t];
                    }
                }
            }
            let proj = ref_affine(&att, blk.attn_proj_weight.data(), blk.attn_proj_bias.data());
            for k in 0..h {
                xs[i][k] += proj[k];
            }
        }
        for x in xs.iter_mut() {
            let n = ref_layer_norm(x, blk.ln_2_weight.data(), blk.ln_2_bias.data());
            let f: Vec<f64> = ref_affine(&n, blk.fc_weight.data(), blk.fc_bias.data())
                .into_iter()
                .map(ref_gelu)
                .collect();
            let m = ref_affine(&f, blk.mlp_proj_weight.data(), blk.mlp_proj_bias.data());
            for k in 0..h {
                x[k] += m[k];
            }
        }
    }
    xs.iter()
        .map(|x| ref_layer_norm(x, p.ln_f_weight.data(), p.ln_f_bias.data()))
        .collect()
}

/// Tied-head logits `[T', V]` for one sequence.
pub fn reference_logits(p: &Parameters<f64>, ids: &[usize]) -> Vec<Vec<f64>> {
    let h = p.config.hidden_size;
    reference_hidden(p, ids)
        .iter()
        .map(|x| {
            (0..p.config.vocab_size)
                .map(|v| (0..h).map(|k| x[k] * p.wte.data()[v * h + k]).sum())
                .collect()
        })
        .collect()
}

/// Template sentences in a clinical register, about `bytes` long.
pub fn synthetic_clinical_corpus(seed: u64, bytes: usize) -> Vec<String> {
    const SUBJECTS: &[&str] = &["the patient", "a biopsy", "the culture", "the infant", "the cohort"];
    const VERBS: &[&str] = &["showed", "revealed", "lacked", "confirmed", "suggested"];
    const OBJECTS: &[&str] = &[
        "fibrin deposits",
        "elevated thrombin",
        "myocardial necrosis",
        "probiotic benefit",
        "gram positive cocci",
        "chorioamnionitis",
    ];
    let mut rng = rng(seed);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < bytes {
        let mut doc = String::new();
        for _ in 0..rng.gen_range(2..5) {
            let s = format!(
                "{} {} {}. ",
                SUBJECTS[rng.gen_range(0..SUBJECTS.len())],
                VERBS[rng.gen_range(0..VERBS.len())],
                OBJECTS[rng.gen_range(0..OBJECTS.len())]
            );
            doc.push_str(&s);
        }
        let doc = doc.trim_end().to_string();
        total += doc.len() + 1;
        docs.push(doc);
    }
    docs
}

use medlm_core::pipeline::{ClsItem, McqItem};

/// Items whose correct option is the one token that also occurs in the
/// question. Content tokens are drawn from `lo..hi`.
pub fn synthetic_mcq(rng: &mut ChaCha8Rng, n: usize, lo: u32, hi: u32) -> Vec<McqItem> {
    (0..n)
        .map(|_| {
            let mut pool: Vec<u32> = (lo..hi).collect();
            rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), rng);
            let question = pool[..5].to_vec();
            let answer = question[rng.gen_range(0..5)];
            let mut options: Vec<Vec<u32>> = pool[5..8].iter().map(|&t| vec![t]).collect();
            let gold = rng.gen_range(0..4);
            options.insert(gold, vec![answer]);
            McqItem {
                question,
                options,
                gold,
            }
        })
        .collect()
}

/// Label 0 ("yes") iff the question token appears in the context.
pub fn synthetic_yes_no(rng: &mut ChaCha8Rng, n: usize, lo: u32, hi: u32) -> Vec<ClsItem> {
    (0..n)
        .map(|_| {
            let mut pool: Vec<u32> = (lo..hi).collect();
            rand::seq::SliceRandom::shuffle(pool.as_mut_slice(), rng);
            let context = pool[..6].to_vec();
            let yes = rng.gen_bool(0.5);
            let q = if yes { context[rng.gen_range(0..6)] } else { pool[6] };
            ClsItem {
                context,
                question: vec![q],
                gold: if yes { 0 } else { 1 },
            }
        })
        .collect()
}
