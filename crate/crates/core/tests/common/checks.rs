//! Randomized checks shared by the unit suites and the acceptance runner.

use medlm_core::autodiff::{Tape, Tensor, Var};
use medlm_core::transformer::{init_params, Batch, HeadSpec, ModelConfig, Parameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{finite_difference, relative_error};

pub const STEP: f64 = 1e-5;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces an op output to a scalar with fixed pseudo-random weights.
fn reduce(tape: &mut Tape<f64>, out: Var) -> Var {
    let n = tape.value(out).len();
    if n == 1 {
        return tape.sum(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(out, &w).unwrap()
}

fn eval<G>(inputs: &[Tensor<f64>], build: &G) -> (f64, Vec<Vec<f64>>)
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = reduce(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let g = vars.iter().map(|&v| grads.get(v).unwrap().data().to_vec()).collect();
    (tape.value(loss).data()[0], g)
}

/// Largest per-input relative error between backward and central differences.
pub fn gradcheck<G>(inputs: &[Tensor<f64>], build: G) -> f64
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let (_, analytic) = eval(inputs, &build);
    let mut worst: f64 = 0.0;
    for slot in 0..inputs.len() {
        let mut probe = inputs.to_vec();
        let numeric = finite_difference(inputs[slot].data(), STEP, |x| {
            probe[slot].data_mut().copy_from_slice(x);
            eval(&probe, &build).0
        });
        worst = worst.max(relative_error(&analytic[slot], &numeric));
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
}

pub type KernelCase = (&'static str, fn(&mut ChaCha8Rng) -> f64);

pub const KERNELS: &[KernelCase] = &[
    ("matmul", |rng| {
        let (m, k, n) = dims(rng);
        let inputs = [randn(rng, &[m, k]), randn(rng, &[k, n])];
        gradcheck(&inputs, |t, v| t.matmul(v[0], v[1]).unwrap())
    }),
    ("matmul_nt", |rng| {
        let (m, k, n) = dims(rng);
        let inputs = [randn(rng, &[m, k]), randn(rng, &[n, k])];
        gradcheck(&inputs, |t, v| t.matmul_nt(v[0], v[1]).unwrap())
    }),
    ("add", |rng| {
        let (m, n, _) = dims(rng);
        let inputs = [randn(rng, &[m, n]), randn(rng, &[m, n])];
        gradcheck(&inputs, |t, v| t.add(v[0], v[1]).unwrap())
    }),
    ("add_broadcast", |rng| {
        let (m, n, _) = dims(rng);
        let inputs = [randn(rng, &[m, n]), randn(rng, &[n])];
        gradcheck(&inputs, |t, v| t.add_broadcast(v[0], v[1]).unwrap())
    }),
    ("scale", |rng| {
        let (m, n, _) = dims(rng);
        let alpha = rng.gen_range(-2.0..2.0);
        gradcheck(&[randn(rng, &[m, n])], move |t, v| t.scale(v[0], alpha))
    }),
    ("reshape", |rng| {
        let (m, n, _) = dims(rng);
        gradcheck(&[randn(rng, &[m, n])], move |t, v| t.reshape(v[0], &[n, m]).unwrap())
    }),
    ("layer_norm", |rng| {
        let m = rng.gen_range(1..4);
        let n = rng.gen_range(2..7);
        let inputs = [randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])];
        gradcheck(&inputs, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())
    }),
    ("gelu", |rng| {
        let (m, n, _) = dims(rng);
        gradcheck(&[randn(rng, &[m, n])], |t, v| t.gelu(v[0]))
    }),
    ("softmax", |rng| {
        let (m, n, _) = dims(rng);
        gradcheck(&[randn(rng, &[m, n])], |t, v| t.softmax(v[0]))
    }),
    ("embed_gather", |rng| {
        let (v, h, n) = dims(rng);
        let ids: Vec<usize> = (0..n + 1).map(|_| rng.gen_range(0..v)).collect();
        gradcheck(&[randn(rng, &[v, h])], move |t, x| t.embed_gather(x[0], &ids).unwrap())
    }),
    ("gather_rows", |rng| {
        let (r, h, n) = dims(rng);
        let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..r)).collect();
        gradcheck(&[randn(rng, &[r, h])], move |t, x| t.gather_rows(x[0], &rows).unwrap())
    }),
    ("dropout", |rng| {
        let (m, n, _) = dims(rng);
        let seed = rng.gen();
        gradcheck(&[randn(rng, &[m, n])], move |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            t.dropout(v[0], 0.3, &mut mask_rng)
        })
    }),
    ("causal_attention", |rng| {
        let heads = rng.gen_range(1..3);
        let d = rng.gen_range(1..4);
        let batch = rng.gen_range(1..3);
        let seq = rng.gen_range(1..5);
        let mut allowed: Vec<bool> = (0..batch * seq).map(|_| rng.gen_bool(0.8)).collect();
        allowed[0] = true;
        let qkv = randn(rng, &[batch * seq, 3 * heads * d]);
        gradcheck(&[qkv], move |t, v| {
            t.causal_attention(v[0], heads, batch, seq, &allowed).unwrap()
        })
    }),
    ("cross_entropy", |rng| {
        let n = rng.gen_range(1..5);
        let v = rng.gen_range(2..6);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        gradcheck(&[randn(rng, &[n, v])], move |t, x| t.cross_entropy(x[0], &targets).unwrap())
    }),
    ("cross_entropy_masked", |rng| {
        let n = rng.gen_range(2..6);
        let v = rng.gen_range(2..6);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        let mut include: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        include[n - 1] = true;
        gradcheck(&[randn(rng, &[n, v])], move |t, x| {
            t.cross_entropy_masked(x[0], &targets, &include).unwrap()
        })
    }),
    ("sum", |rng| {
        let (m, n, _) = dims(rng);
        gradcheck(&[randn(rng, &[m, n])], |t, v| {
            let s = t.sum(v[0]);
            t.scale(s, 0.5)
        })
    }),
    ("composed", |rng| {
        let (m, h, _) = dims(rng);
        let inputs = [
            randn(rng, &[m, h]),
            randn(rng, &[h, 2 * h]),
            randn(rng, &[2 * h]),
            randn(rng, &[2 * h]),
        ];
        gradcheck(&inputs, |t, v| {
            let a = t.matmul(v[0], v[1]).unwrap();
            let a = t.add_broadcast(a, v[2]).unwrap();
            let a = t.layer_norm(a, v[3], v[2]).unwrap();
            let a = t.gelu(a);
            t.softmax(a)
        })
    }),
];

/// Worst error of one kernel over `trials` seeded trials, with the trial it came from.
pub fn kernel_worst(case: &KernelCase, trials: u64) -> (f64, u64) {
    (0..trials)
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            ((case.1)(&mut rng), trial)
        })
        .fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a })
}

fn loss_and_grads(
    p: &Parameters<f64>,
    batch: &Batch,
    targets: &[usize],
    head: HeadSpec,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, true);
    let hidden = p
        .hidden_states::<ChaCha8Rng>(&mut tape, &bound, batch, None)
        .unwrap();
    let out = match head {
        HeadSpec::LanguageModel => p.lm_logits(&mut tape, &bound, hidden).unwrap(),
        _ => p.head_scores(&mut tape, &bound, hidden, batch).unwrap(),
    };
    let loss = tape.cross_entropy(out, targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    let flat = bound
        .vars
        .iter()
        .flat_map(|&v| grads.get(v).unwrap().data().to_vec())
        .collect();
    (tape.value(loss).data()[0], flat)
}

fn flat(p: &Parameters<f64>) -> Vec<f64> {
    p.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

fn unflat(p: &mut Parameters<f64>, xs: &[f64]) {
    let mut i = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&xs[i..i + n]);
        i += n;
    }
}

/// Relative error of the full-model gradient for one randomized micro-model,
/// batch and head. The head cycles with `trial`.
pub fn end_to_end_error(trial: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
    let heads = rng.gen_range(1..3);
    let cfg = ModelConfig {
        hidden_size: heads * rng.gen_range(2..5),
        heads,
        layers: rng.gen_range(1..3),
        vocab_size: rng.gen_range(5..12),
        max_sequence: 6,
        dropout: 0.0,
    };
    let head = match trial % 3 {
        0 => HeadSpec::LanguageModel,
        1 => HeadSpec::OptionScorer,
        _ => HeadSpec::Classifier { num_labels: 3 },
    };
    let mut p = init_params::<f64>(&cfg, trial).unwrap();
    // larger weights so every path carries signal
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x *= 10.0;
        }
    }
    p.attach_head(head, trial + 1).unwrap();
    let v = cfg.vocab_size as u32;
    let rows: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..v)).collect())
        .collect();
    let batch = Batch::padded(&rows, 0).unwrap();
    let targets: Vec<usize> = match head {
        HeadSpec::LanguageModel => batch.ids.iter().map(|_| rng.gen_range(0..cfg.vocab_size)).collect(),
        HeadSpec::OptionScorer => vec![0, 0],
        HeadSpec::Classifier { .. } => vec![rng.gen_range(0..3), rng.gen_range(0..3)],
    };
    let (_, analytic) = loss_and_grads(&p, &batch, &targets, head);
    let x0 = flat(&p);
    let mut probe = p.clone();
    let numeric = finite_difference(&x0, STEP, |x| {
        unflat(&mut probe, x);
        loss_and_grads(&probe, &batch, &targets, head).0
    });
    relative_error(&analytic, &numeric)
}

/// Perturbs one random future token and reports whether every earlier
/// position's logits are bitwise unchanged.
pub fn causality_trial(trial: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
    let heads = rng.gen_range(1..4);
    let cfg = ModelConfig {
        hidden_size: heads * rng.gen_range(2..9),
        heads,
        layers: rng.gen_range(1..3),
        vocab_size: rng.gen_range(8..64),
        max_sequence: 24,
        dropout: 0.0,
    };
    let p = init_params::<f32>(&cfg, trial).unwrap();
    let v = cfg.vocab_size;
    let len = rng.gen_range(2..=cfg.max_sequence);
    let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
    let at = rng.gen_range(1..len);
    let mut changed = ids.clone();
    changed[at] = (ids[at] + rng.gen_range(1..v as u32)) % v as u32;
    let la = p.forward(&Batch::padded(&[ids], 0).unwrap(), HeadSpec::LanguageModel).unwrap();
    let lb = p.forward(&Batch::padded(&[changed], 0).unwrap(), HeadSpec::LanguageModel).unwrap();
    let before = at * v;
    let same = la.data()[..before]
        .iter()
        .zip(&lb.data()[..before])
        .all(|(a, b)| a.to_bits() == b.to_bits());
    if same {
        Ok(())
    } else {
        Err(format!("trial {trial}: logits before position {at} moved"))
    }
}
