use rand::Rng;

use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Stabilizer added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf {
        trainable: bool,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        alpha: F,
    },
    Reshape {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        // per-row normalized input and reciprocal std
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    EmbedGather {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        batch: usize,
        seq: usize,
        allowed: Vec<bool>,
        // [batch, heads, seq, seq]; zero where attention is disallowed
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        include: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Ordered record of executed operations.
///
/// Inputs always precede their consumers, so the node order is topological.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    /// `a [.., K] @ b [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.last_dim();
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(AutodiffError::Shape(format!(
                "matmul {:?} @ {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, n) = (av.rows(), bv.shape()[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `a [.., K] @ b[N, K]^T -> [.., N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let k = av.last_dim();
        if bv.shape().len() != 2 || bv.shape()[1] != k {
            return Err(AutodiffError::Shape(format!(
                "matmul_nt {:?} @ {:?}^T",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, n) = (av.rows(), bv.shape()[0]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            1,
            k as isize,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMulNt { a, b }))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(AutodiffError::Shape(format!(
                "add_broadcast {sa:?} + {sb:?}"
            )));
        }
        let inner = bv.len();
        let data = av
            .data()
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast { a, b }))
    }

    pub fn scale(&mut self, x: Var, alpha: F) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * alpha).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, alpha })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (each `[N]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.last_dim();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(AutodiffError::Shape(format!(
                "layer_norm over {:?} with gain {:?} bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let eps = F::cast_from(LAYER_NORM_EPS);
        let inv_n = F::one() / F::cast_from(n as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let start = out.len();
            softmax_into(row, &mut out);
            debug_assert_eq!(out.len() - start, n);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax { x })
    }

    /// Gathers rows of `table [V, H]` for each id, giving `[ids.len(), H]`.
    pub fn embed_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(AutodiffError::Shape(format!(
                "embedding table must be 2-D, got {:?}",
                tv.shape()
            )));
        }
        let (vocab, h) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(AutodiffError::Shape("embed_gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(AutodiffError::Domain(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        Ok(self.push(
            value,
            Op::EmbedGather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Selects rows of `x` viewed as `[R, N]`, giving `[rows.len(), N]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if rows.is_empty() {
            return Err(AutodiffError::Shape("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(AutodiffError::Domain(format!(
                "row {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::cast_from(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<F> = (0..xv.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    /// Multi-head causal self-attention over a fused projection.
    ///
    /// `qkv` is `[batch * seq, 3H]` with each row laid out as `q | k | v`.
    /// `allowed` marks real (non-pad) positions, `[batch * seq]`. Query `i`
    /// attends to key `j` only when `j <= i` and `allowed[j]`; a query with no
    /// admissible key yields zeros. Output is `[batch * seq, H]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        heads: usize,
        batch: usize,
        seq: usize,
        allowed: &[bool],
    ) -> Result<Var> {
        let qv = self.value(qkv);
        let width = qv.last_dim();
        if heads == 0 || width % (3 * heads) != 0 || qv.rows() != batch * seq {
            return Err(AutodiffError::Shape(format!(
                "attention input {:?} for batch {batch}, seq {seq}, heads {heads}",
                qv.shape()
            )));
        }
        if allowed.len() != batch * seq {
            return Err(AutodiffError::Shape(format!(
                "attention mask has {} entries, expected {}",
                allowed.len(),
                batch * seq
            )));
        }
        let hidden = width / 3;
        let d = hidden / heads;
        let scale = F::one() / F::cast_from(d as f64).sqrt();
        let data = qv.data();
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); batch * seq * hidden];
        let mut scores = vec![F::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qrow = (b * seq + i) * width + h * d;
                    let q = &data[qrow..qrow + d];
                    let mut max = F::neg_infinity();
                    let mut any = false;
                    for j in 0..=i {
                        if !allowed[b * seq + j] {
                            continue;
                        }
                        let krow = (b * seq + j) * width + hidden + h * d;
                        let k = &data[krow..krow + d];
                        let s = dot(q, k) * scale;
                        scores[j] = s;
                        if !any || s > max {
                            max = s;
                        }
                        any = true;
                    }
                    if !any {
                        continue;
                    }
                    let mut total = F::zero();
                    for j in 0..=i {
                        if allowed[b * seq + j] {
                            let e = (scores[j] - max).exp();
                            probs[p_base + i * seq + j] = e;
                            total = total + e;
                        }
                    }
                    let orow = (b * seq + i) * hidden + h * d;
                    for j in 0..=i {
                        if !allowed[b * seq + j] {
                            continue;
                        }
                        let p = probs[p_base + i * seq + j] / total;
                        probs[p_base + i * seq + j] = p;
                        let vrow = (b * seq + j) * width + 2 * hidden + h * d;
                        for t in 0..d {
                            out[orow + t] = out[orow + t] + p * data[vrow + t];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, hidden], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                qkv,
                heads,
                batch,
                seq,
                allowed: allowed.to_vec(),
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits [N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let include = vec![true; targets.len()];
        self.cross_entropy_masked(logits, targets, &include)
    }

    /// Cross-entropy averaged over the rows where `include` is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        include: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() || include.len() != targets.len()
        {
            return Err(AutodiffError::Shape(format!(
                "cross_entropy logits {:?} with {} targets and {} mask entries",
                lv.shape(),
                targets.len(),
                include.len()
            )));
        }
        let v = lv.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(AutodiffError::Domain(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(AutodiffError::Contract(
                "cross_entropy needs at least one included position".into(),
            ));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = F::zero();
        for (r, (&t, &inc)) in targets.iter().zip(include).enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let sum_exp = row.iter().map(|&x| (x - max).exp()).sum::<F>();
            let log_z = max + sum_exp.ln();
            if inc {
                total = total + (log_z - row[t]);
            }
            probs.extend(row.iter().map(|&x| (x - log_z).exp()));
        }
        let loss = total / F::cast_from(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// `sum(x * weights)` for a fixed weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(AutodiffError::Shape(format!(
                "weighted_sum of {} elements with {} weights",
                xv.len(),
                weights.len()
            )));
        }
        let total = xv.data().iter().zip(weights).map(|(&a, &w)| a * w).sum::<F>();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    ///
    /// Leaves that do not influence `loss` get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf { trainable } = node.op {
                if trainable {
                    grads[idx] = Some(g);
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf { trainable: true } => {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![F::zero(); node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("leaf shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if self.wants(*a) {
                    // dA = dC @ B^T
                    let da = acc(grads, *a, av.len());
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        F::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if self.wants(*b) {
                    // dB = A^T @ dC
                    let db = acc(grads, *b, bv.len());
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        av.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[0]);
                if self.wants(*a) {
                    // dA = dC @ B
                    let da = acc(grads, *a, av.len());
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g,
                        n as isize,
                        1,
                        bv.data(),
                        k as isize,
                        1,
                        F::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if self.wants(*b) {
                    // dB = dC^T @ A
                    let db = acc(grads, *b, bv.len());
                    F::gemm(
                        n,
                        m,
                        k,
                        F::one(),
                        g,
                        1,
                        n as isize,
                        av.data(),
                        k as isize,
                        1,
                        F::one(),
                        db,
                        k as isize,
                        1,
                    );
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let inner = self.value(*b).len();
                    let db = acc(grads, *b, inner);
                    for chunk in g.chunks(inner) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Scale { x, alpha } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d = *d + gi * *alpha;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let n = gv.len();
                if self.wants(*gain) {
                    let dg = acc(grads, *gain, n);
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] = dg[j] + row_g[j] * row_h[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = acc(grads, *bias, n);
                    for row_g in g.chunks(n) {
                        add_into(db, row_g);
                    }
                }
                if self.wants(*x) {
                    let inv_n = F::one() / F::cast_from(n as f64);
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![F::zero(); n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row_g = &g[r * n..(r + 1) * n];
                        let row_h = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..n {
                            dxhat[j] = row_g[j] * gv.data()[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dh = mean_dh + dxhat[j] * row_h[j];
                        }
                        mean_d = mean_d * inv_n;
                        mean_dh = mean_dh * inv_n;
                        let out = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] = out[j] + rs * (dxhat[j] - mean_d - row_h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv.data()) {
                        *d = *d + gi * gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let n = y.last_dim();
                    let dx = acc(grads, *x, g.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let inner = dot(yr, gr);
                        let out = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] = out[j] + yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::EmbedGather { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let h = tv.last_dim();
                    let dt = acc(grads, *table, tv.len());
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * h..(id + 1) * h], &g[i * h..(i + 1) * h]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let n = xv.last_dim();
                    let dx = acc(grads, *x, xv.len());
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gi * m;
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                heads,
                batch,
                seq,
                allowed,
                probs,
            } => {
                if !self.wants(*qkv) {
                    return;
                }
                let qv = self.value(*qkv);
                let data = qv.data();
                let width = qv.last_dim();
                let hidden = width / 3;
                let (heads, batch, seq) = (*heads, *batch, *seq);
                let d = hidden / heads;
                let scale = F::one() / F::cast_from(d as f64).sqrt();
                let dq = acc(grads, *qkv, qv.len());
                let mut dp = vec![F::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let orow = (b * seq + i) * hidden + h * d;
                            let go = &g[orow..orow + d];
                            let mut inner = F::zero();
                            for j in 0..=i {
                                if !allowed[b * seq + j] {
                                    continue;
                                }
                                let p = probs[p_base + i * seq + j];
                                let vrow = (b * seq + j) * width + 2 * hidden + h * d;
                                dp[j] = dot(go, &data[vrow..vrow + d]);
                                inner = inner + p * dp[j];
                                // dV_j += p_ij * dO_i
                                for t in 0..d {
                                    dq[vrow + t] = dq[vrow + t] + p * go[t];
                                }
                            }
                            let qrow = (b * seq + i) * width + h * d;
                            for j in 0..=i {
                                if !allowed[b * seq + j] {
                                    continue;
                                }
                                let p = probs[p_base + i * seq + j];
                                let ds = p * (dp[j] - inner) * scale;
                                let krow = (b * seq + j) * width + hidden + h * d;
                                for t in 0..d {
                                    dq[qrow + t] = dq[qrow + t] + ds * data[krow + t];
                                    dq[krow + t] = dq[krow + t] + ds * data[qrow + t];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                include,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).last_dim();
                    let coef = g[0] / F::cast_from(*count as f64);
                    let dl = acc(grads, *logits, probs.len());
                    for (r, (&t, &inc)) in targets.iter().zip(include).enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (j, d) in row.iter_mut().enumerate() {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            *d = *d + coef * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let n = self.value(*x).len();
                    let dx = acc(grads, *x, n);
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let dx = acc(grads, *x, weights.len());
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d = *d + g[0] * w;
                    }
                }
            }
        }
    }

    /// Whether gradient flow into `v` can reach a trainable leaf.
    fn wants(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf { trainable: false })
    }
}

/// Gradients of one backward pass, indexed by the leaf [`Var`]s.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for a trainable leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

fn softmax_into<F: Scalar>(row: &[F], out: &mut Vec<F>) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let start = out.len();
    let mut total = F::zero();
    for &x in row {
        let e = (x - max).exp();
        total = total + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / total;
    }
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let half = F::cast_from(0.5);
    let u = c * (x + F::cast_from(GELU_COEF) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let half = F::cast_from(0.5);
    let k = F::cast_from(GELU_COEF);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::cast_from(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}
