use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, softmax_in_place, Scalar, Tensor, TensorError, View};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a fused multi-head attention call.  Queries are
/// `[batch·tq, d]`, keys and values `[batch·tk, d]`; key `j` of batch row `b`
/// is visible when `j < key_lens[b]` (and `j ≤ i` when causal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub tq: usize,
    pub tk: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Embed { table: Var, ids: Vec<u32> },
    Concat(Vec<Var>),
    Dropout { x: Var, mask: Vec<F> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<F> },
    Softmax(Var),
    Sum(Var),
    SelectRows { a: Var, rows: Vec<usize> },
    SmoothedNll { logits: Var, targets: Vec<u32>, pad: u32, eps: F, probs: Vec<F>, count: usize },
}

/// Counter-based dropout stream: the same `(seed, site, step)` always yields
/// the same numbers.
pub fn dropout_rng(seed: u64, site: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(site);
    rng
}

/// A recording of one forward pass.
pub struct Graph<F: Scalar> {
    values: Vec<Arc<Tensor<F>>>,
    ops: Vec<Op<F>>,
    needs_grad: Vec<bool>,
    params: IndexMap<String, Var>,
    training: bool,
    seed: u64,
    step: u64,
    sites: u64,
}

pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Graph::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Scalar> Graph<F> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            params: IndexMap::new(),
            training: false,
            seed: 0,
            step: 0,
            sites: 0,
        }
    }

    /// Training-mode graph whose dropout masks derive from `(seed, step)`.
    pub fn training(seed: u64, step: u64) -> Self {
        Graph {
            training: true,
            seed,
            step,
            ..Graph::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Next random stream for this forward pass.
    pub fn next_rng(&mut self) -> ChaCha8Rng {
        self.sites += 1;
        dropout_rng(self.seed, self.sites, self.step)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.values.push(Arc::new(value));
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// A trainable leaf.  Registering the same name twice returns the same
    /// handle, which is how weight tying works.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor<F>>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.values.push(Arc::clone(value));
        self.ops.push(Op::Leaf);
        self.needs_grad.push(true);
        let v = Var(self.values.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a·b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if tb.shape().len() != 2 || ta.shape().is_empty() {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let bv = if trans_b { View::rows(k).t() } else { View::rows(n) };
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, ta.data(), View::rows(k), tb.data(), bv, &mut out, View::rows(n), false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, trans_b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), needs))
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[bias.0]);
        if tb.shape() != [ta.cols()] {
            return Err(mismatch("add_bias", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(ta.cols().max(1)) {
            row.iter_mut().zip(tb.data()).for_each(|(x, &b)| *x += b);
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a, bias]);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, bias), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| x * s).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(Tensor { shape, data }, Op::Scale(a, s), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (F::lit(GELU_C), F::lit(GELU_A));
        let half = F::lit(0.5);
        let ta = &self.values[a.0];
        let data = ta
            .data()
            .iter()
            .map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(Tensor { shape, data }, Op::Gelu(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| x.max(F::zero())).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(Tensor { shape, data }, Op::Relu(a), needs)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let tx = &self.values[x.0];
        let d = tx.cols();
        for p in [gain, bias] {
            if self.values[p.0].shape() != [d] {
                return Err(mismatch("layer_norm", tx.shape(), self.values[p.0].shape()));
            }
        }
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let rows = tx.rows();
        let inv_d = F::one() / F::lit(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + F::lit(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let t = &self.values[table.0];
        if t.shape().len() != 2 {
            return Err(mismatch("embed", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange { index: id, size: v });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let needs = self.needs(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data: out,
            },
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Joins 2-D operands with equal row counts along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.values[parts[0].0].rows();
        let mut width = 0;
        for p in parts {
            let t = &self.values[p.0];
            if t.rows() != rows {
                return Err(mismatch("concat", self.values[parts[0].0].shape(), t.shape()));
            }
            width += t.cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, width],
                data: out,
            },
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    /// Inverted dropout: zeroes with probability `p`, scales survivors by
    /// `1/(1-p)`.  Identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let mut rng = self.next_rng();
        let keep = F::lit(1.0 / (1.0 - p));
        let tx = &self.values[x.0];
        let mask: Vec<F> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = tx.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor { shape, data }, Op::Dropout { x, mask }, needs)
    }

    /// Scaled dot-product attention over `heads` equal column slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var, TensorError> {
        let (tq_, tk_, tv_) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        let d = tq_.cols();
        let AttentionSpec {
            batch,
            heads,
            tq,
            tk,
            causal,
            ..
        } = spec;
        if tq_.rows() != batch * tq || tk_.rows() != batch * tk || tk_.shape() != tv_.shape() || tk_.cols() != d {
            return Err(mismatch("attention", tq_.shape(), tk_.shape()));
        }
        if heads == 0 || d % heads != 0 || spec.key_lens.len() != batch {
            return Err(TensorError::InvalidArgument(format!(
                "attention: d={d}, heads={heads}, key_lens={}",
                spec.key_lens.len()
            )));
        }
        if spec.key_lens.iter().any(|&l| l == 0 || l > tk) {
            return Err(TensorError::InvalidArgument("attention: key length out of range".into()));
        }
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut probs = vec![F::zero(); batch * heads * tq * tk];
        let mut out = vec![F::zero(); batch * tq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * tk..][..tq * tk];
                let qv = View::at(b * tq * d + h * dh, d, 1);
                let kv = View::at(b * tk * d + h * dh, d, 1);
                gemm(tq, dh, tk, tq_.data(), qv, tk_.data(), kv.t(), p, View::rows(tk), false);
                for i in 0..tq {
                    let row = &mut p[i * tk..(i + 1) * tk];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if j >= spec.key_lens[b] || (causal && j > i) {
                            F::neg_infinity()
                        } else {
                            *s * scale
                        };
                    }
                    softmax_in_place(row);
                }
                gemm(tq, tk, dh, p, View::rows(tk), tv_.data(), kv, &mut out, qv, false);
            }
        }
        let shape = tq_.shape().to_vec();
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(Tensor { shape, data: out }, Op::Attention { q, k, v, spec, probs }, needs))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// `[batch, heads, tq, tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionSpec, &[F])> {
        match &self.ops[v.0] {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        data.chunks_mut(c.max(1)).for_each(softmax_in_place);
        let shape = ta.shape().to_vec();
        let needs = self.needs(&[a]);
        self.push(Tensor { shape, data }, Op::Softmax(a), needs)
    }

    /// Gathers rows of a 2-D activation.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let ta = &self.values[a.0];
        let c = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= ta.rows() {
                return Err(TensorError::IndexOutOfRange {
                    index: r as u32,
                    size: ta.rows(),
                });
            }
            data.extend_from_slice(ta.row(r));
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), c],
                data,
            },
            Op::SelectRows { a, rows: rows.to_vec() },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Label-smoothed cross-entropy averaged over non-pad targets:
    /// `(1-eps)·NLL + eps·mean_v(-log p_v)`.
    pub fn smoothed_nll(&mut self, logits: Var, targets: &[u32], pad: u32, eps: f64) -> Result<Var, TensorError> {
        let t = &self.values[logits.0];
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(mismatch("smoothed_nll", t.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(TensorError::InvalidArgument(format!("label smoothing {eps}")));
        }
        let count = targets.iter().filter(|&&y| y != pad).count();
        if count == 0 {
            return Err(TensorError::AllPadTarget);
        }
        let (e, inv_v) = (F::lit(eps), F::one() / F::lit(vocab as f64));
        let mut probs = vec![F::zero(); rows * vocab];
        let mut total = F::zero();
        for (r, &y) in targets.iter().enumerate() {
            if y == pad {
                continue;
            }
            if y as usize >= vocab {
                return Err(TensorError::IndexOutOfRange { index: y, size: vocab });
            }
            let z = t.row(r);
            let max = z.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            let nll = lse - z[y as usize];
            let smooth = lse - z.iter().copied().sum::<F>() * inv_v;
            total += (F::one() - e) * nll + e * smooth;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(z) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / F::lit(count as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                pad,
                eps: e,
                probs,
                count,
            },
            needs,
        ))
    }

    /// Registered parameter handles, in registration order.
    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let shape = self.values[loss.0].shape();
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every registered parameter, by name.  Parameters that
    /// did not influence the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients<F>) -> IndexMap<String, Tensor<F>> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let shape = self.values[v.0].shape().to_vec();
                let t = match grads.get(v) {
                    Some(g) => Tensor {
                        shape,
                        data: g.to_vec(),
                    },
                    None => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect()
    }

    fn backprop(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let needs = &self.needs_grad;
        let vals = &self.values;
        let mut acc = |v: Var, grads: &mut [Option<Vec<F>>]| -> Option<Vec<F>> {
            if !needs[v.0] {
                return None;
            }
            Some(grads[v.0].take().unwrap_or_else(|| vec![F::zero(); vals[v.0].len()]))
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let (m, k) = (ta.rows(), ta.cols());
                let n = vals[i].cols();
                if let Some(mut ga) = acc(*a, grads) {
                    // dA = G·Bᵀ  (or G·B when B was used transposed)
                    let bv = if *trans_b { View::rows(k) } else { View::rows(n).t() };
                    gemm(m, n, k, g, View::rows(n), tb.data(), bv, &mut ga, View::rows(k), true);
                    grads[a.0] = Some(ga);
                }
                if let Some(mut gb) = acc(*b, grads) {
                    if *trans_b {
                        gemm(n, m, k, g, View::rows(n).t(), ta.data(), View::rows(k), &mut gb, View::rows(k), true);
                    } else {
                        gemm(k, m, n, ta.data(), View::rows(k).t(), g, View::rows(n), &mut gb, View::rows(n), true);
                    }
                    grads[b.0] = Some(gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(mut gv) = acc(*v, grads) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                        grads[v.0] = Some(gv);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(mut ga) = acc(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    grads[a.0] = Some(ga);
                }
                if let Some(mut gb) = acc(*bias, grads) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                    grads[bias.0] = Some(gb);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if let Some(mut gv) = acc(*v, grads) {
                        let o = vals[other.0].data();
                        for ((x, &y), &z) in gv.iter_mut().zip(g).zip(o) {
                            *x += y * z;
                        }
                        grads[v.0] = Some(gv);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(mut ga) = acc(*a, grads) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                    grads[a.0] = Some(ga);
                }
            }
            Op::Gelu(a) => {
                if let Some(mut ga) = acc(*a, grads) {
                    let (c, k, half) = (F::lit(GELU_C), F::lit(GELU_A), F::lit(0.5));
                    let three = F::lit(3.0);
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let d = half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three * k * v * v);
                        *x += y * d;
                    }
                    grads[a.0] = Some(ga);
                }
            }
            Op::Relu(a) => {
                if let Some(mut ga) = acc(*a, grads) {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                        if v > F::zero() {
                            *x += y;
                        }
                    }
                    grads[a.0] = Some(ga);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = vals[x.0].cols();
                let gv = vals[gain.0].data();
                if let Some(mut gx) = acc(*x, grads) {
                    let inv_d = F::one() / F::lit(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = gy[j] * gv[j];
                            gx[r * d + j] += rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    grads[x.0] = Some(gx);
                }
                if let Some(mut gg) = acc(*gain, grads) {
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                    grads[gain.0] = Some(gg);
                }
                if let Some(mut gb) = acc(*bias, grads) {
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(x, &y)| *x += y);
                    }
                    grads[bias.0] = Some(gb);
                }
            }
            Op::Embed { table, ids } => {
                if let Some(mut gt) = acc(*table, grads) {
                    let d = vals[table.0].cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, &y)| *x += y);
                    }
                    grads[table.0] = Some(gt);
                }
            }
            Op::Concat(parts) => {
                let width = vals[i].cols();
                let mut offset = 0;
                for p in parts {
                    let c = vals[p.0].cols();
                    if let Some(mut gp) = acc(*p, grads) {
                        for (r, row) in gp.chunks_mut(c.max(1)).enumerate() {
                            let src = &g[r * width + offset..r * width + offset + c];
                            row.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                        grads[p.0] = Some(gp);
                    }
                    offset += c;
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(mut gx) = acc(*x, grads) {
                    for ((a, &y), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += y * m;
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(*q, *k, *v, spec, probs, g, grads, &mut acc);
            }
            Op::Softmax(a) => {
                if let Some(mut ga) = acc(*a, grads) {
                    let y = vals[i].data();
                    let c = vals[i].cols().max(1);
                    for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                    grads[a.0] = Some(ga);
                }
            }
            Op::SelectRows { a, rows } => {
                if let Some(mut ga) = acc(*a, grads) {
                    let c = vals[a.0].cols();
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut ga[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(x, &y)| *x += y);
                    }
                    grads[a.0] = Some(ga);
                }
            }
            Op::Sum(a) => {
                if let Some(mut ga) = acc(*a, grads) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                    grads[a.0] = Some(ga);
                }
            }
            Op::SmoothedNll {
                logits,
                targets,
                pad,
                eps,
                probs,
                count,
            } => {
                if let Some(mut gl) = acc(*logits, grads) {
                    let vocab = vals[logits.0].cols();
                    let w = g[0] / F::lit(*count as f64);
                    let uniform = *eps / F::lit(vocab as f64);
                    for (r, &y) in targets.iter().enumerate() {
                        if y == *pad {
                            continue;
                        }
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (j, (x, &p)) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]).enumerate() {
                            let mut d = p - uniform;
                            if j == y as usize {
                                d -= F::one() - *eps;
                            }
                            *x += w * d;
                        }
                    }
                    grads[logits.0] = Some(gl);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        acc: &mut impl FnMut(Var, &mut [Option<Vec<F>>]) -> Option<Vec<F>>,
    ) {
        let vals = &self.values;
        let d = vals[q.0].cols();
        let AttentionSpec {
            batch, heads, tq, tk, ..
        } = *spec;
        let dh = d / heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut gq = acc(q, grads);
        let mut gk = acc(k, grads);
        let mut gv = acc(v, grads);
        let mut dp = vec![F::zero(); tq * tk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * tq * tk..][..tq * tk];
                let qv = View::at(b * tq * d + h * dh, d, 1);
                let kv = View::at(b * tk * d + h * dh, d, 1);
                if let Some(gv) = gv.as_mut() {
                    gemm(tk, tq, dh, p, View::rows(tk).t(), g, qv, gv, kv, true);
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                gemm(tq, dh, tk, g, qv, vals[v.0].data(), kv.t(), &mut dp, View::rows(tk), false);
                for i in 0..tq {
                    let pr = &p[i * tk..(i + 1) * tk];
                    let dr = &mut dp[i * tk..(i + 1) * tk];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pj) in dr.iter_mut().zip(pr) {
                        *x = pj * (*x - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(tq, tk, dh, &dp, View::rows(tk), vals[k.0].data(), kv, gq, qv, true);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(tk, tq, dh, &dp, View::rows(tk).t(), vals[q.0].data(), qv, gk, kv, true);
                }
            }
        }
        for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(gr) = gr {
                grads[var.0] = Some(gr);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Arc<Tensor<f64>> {
        let n = shape.iter().product();
        Arc::new(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
    }

    /// Central finite differences on every input of a scalar function.
    fn check(inputs: Vec<Arc<Tensor<f64>>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let run = |inputs: &[Arc<Tensor<f64>>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(&format!("p{i}"), t))
                .collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g, vars, out) = run(&inputs);
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (idx, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; inputs[idx].len()]);
            for e in 0..inputs[idx].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                Arc::make_mut(&mut plus[idx]).data_mut()[e] += h;
                Arc::make_mut(&mut minus[idx]).data_mut()[e] -= h;
                let (gp, _, op) = run(&plus);
                let (gm, _, om) = run(&minus);
                let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * h);
                let err = (numeric - analytic[e]).abs() / numeric.abs().max(analytic[e].abs()).max(1e-3);
                assert!(err < 1e-5, "input {idx} elem {e}: numeric {numeric} analytic {}", analytic[e]);
            }
        }
    }

    fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(x).to_vec();
        let w = rand_tensor(&mut rng, shape);
        let w = g.constant((*w).clone());
        let m = g.mul(x, w).unwrap();
        g.sum(m)
    }

    #[test]
    fn scalar_product_rule() {
        let mut g = Graph::new();
        let x = g.param("x", &Arc::new(Tensor::scalar(3.0f64)));
        let y = g.param("y", &Arc::new(Tensor::scalar(-2.0f64)));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[-2.0]);
        assert_eq!(grads.get(y).unwrap(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_tensor(&mut rng, vec![3, 4]), rand_tensor(&mut rng, vec![4, 5])];
        check(inputs, |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, m, 9)
        });
        let inputs = vec![rand_tensor(&mut rng, vec![3, 4]), rand_tensor(&mut rng, vec![5, 4])];
        check(inputs, |g, v| {
            let m = g.matmul_t(v[0], v[1]).unwrap();
            weighted_sum(g, m, 9)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![rand_tensor(&mut rng, vec![3, 4]), rand_tensor(&mut rng, vec![4])];
        check(inputs, |g, v| {
            let a = g.add_bias(v[0], v[1]).unwrap();
            let b = g.gelu(a);
            let c = g.add(b, v[0]).unwrap();
            let d = g.scale(c, 0.7);
            let e = g.softmax(d);
            weighted_sum(g, e, 3)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(&mut rng, vec![3, 6]),
            rand_tensor(&mut rng, vec![6]),
            rand_tensor(&mut rng, vec![6]),
        ];
        check(inputs, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(g, y, 4)
        });
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(vec![1, 4], 3.0));
        let gain = g.constant(Tensor::filled(vec![4], 1.0));
        let bias = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_tensor(&mut rng, vec![5, 3]), rand_tensor(&mut rng, vec![4, 2])];
        check(inputs, |g, v| {
            let a = g.embed(v[0], &[0, 4, 4, 1]).unwrap();
            let c = g.concat(&[a, v[1]]).unwrap();
            let c = g.select_rows(c, &[3, 0, 3]).unwrap();
            weighted_sum(g, c, 5)
        });
        let mut g = Graph::<f32>::new();
        let t = g.constant(Tensor::zeros(vec![2, 2]));
        assert_eq!(g.embed(t, &[2]), Err(TensorError::IndexOutOfRange { index: 2, size: 2 }));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (batch, tq, tk, d) = (2, 3, 4, 4);
        for causal in [false, true] {
            let tk = if causal { tq } else { tk };
            let inputs = vec![
                rand_tensor(&mut rng, vec![batch * tq, d]),
                rand_tensor(&mut rng, vec![batch * tk, d]),
                rand_tensor(&mut rng, vec![batch * tk, d]),
            ];
            let spec = AttentionSpec {
                batch,
                heads: 2,
                tq,
                tk,
                key_lens: vec![tk, tk - 1],
                causal,
            };
            check(inputs, |g, v| {
                let a = g.attention(v[0], v[1], v[2], spec.clone()).unwrap();
                weighted_sum(g, a, 6)
            });
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_respect_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let q = g.constant((*rand_tensor(&mut rng, vec![6, 4])).clone());
        let k = g.constant((*rand_tensor(&mut rng, vec![6, 4])).clone());
        let spec = AttentionSpec {
            batch: 2,
            heads: 2,
            tq: 3,
            tk: 3,
            key_lens: vec![3, 2],
            causal: true,
        };
        let a = g.attention(q, k, k, spec).unwrap();
        let (spec, probs) = g.attention_probs(a).unwrap();
        for (r, row) in probs.chunks(spec.tk).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let i = r % spec.tq;
            let b = r / (spec.tq * spec.heads);
            for (j, &p) in row.iter().enumerate() {
                if j > i || j >= spec.key_lens[b] {
                    assert_eq!(p, 0.0);
                }
            }
        }
    }

    #[test]
    fn smoothed_nll_values_and_gradients() {
        // eps = 0: plain NLL of a 3-class softmax
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let l = g.smoothed_nll(z, &[2], 0, 0.0).unwrap();
        let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((g.value(l).data()[0] - (lse - 3.0)).abs() < 1e-12);

        // eps = 0.1 by hand: 0.9·(lse − 3) + 0.1·(lse − 2)
        let l = g.smoothed_nll(z, &[2], 0, 0.1).unwrap();
        let expected = 0.9 * (lse - 3.0) + 0.1 * (lse - 2.0);
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);

        // uniform logits give log V for any eps
        let u = g.constant(Tensor::zeros(vec![2, 7]));
        for eps in [0.0, 0.1, 0.5] {
            let l = g.smoothed_nll(u, &[3, 5], 0, eps).unwrap();
            assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
        }
        assert_eq!(g.smoothed_nll(u, &[0, 0], 0, 0.1), Err(TensorError::AllPadTarget));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![rand_tensor(&mut rng, vec![4, 5])];
        check(inputs, |g, v| g.smoothed_nll(v[0], &[1, 0, 4, 2], 0, 0.1).unwrap());
    }

    #[test]
    fn softmax_nll_gradient_closed_form() {
        let mut g = Graph::<f64>::new();
        let z = g.param("z", &Arc::new(Tensor::from_rows(&[&[0.5, -1.0, 2.0]]).unwrap()));
        let l = g.smoothed_nll(z, &[1], 99, 0.0).unwrap();
        let grads = g.backward(l).unwrap();
        let mut p = [0.5, -1.0, 2.0];
        softmax_in_place(&mut p);
        let expected = [p[0], p[1] - 1.0, p[2]];
        for (a, b) in grads.get(z).unwrap().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_reproducible_and_scaled() {
        let x = Tensor::filled(vec![1000], 1.0f32);
        let run = |step| {
            let mut g = Graph::training(11, step);
            let v = g.constant(x.clone());
            let d = g.dropout(v, 0.25);
            g.value(d).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let kept = run(3).data().iter().filter(|&&v| v != 0.0).count();
        assert!((700..800).contains(&kept));
        assert!(run(3).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));

        let mut g = Graph::<f32>::new();
        let v = g.constant(x.clone());
        assert_eq!(g.dropout(v, 0.25), v);
    }
}
