//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! records in reverse and returns the gradient of a scalar node with respect
//! to every node that requires one.

use crate::error::{Error, Result};
use crate::nncore::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::nncore::{Real, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied operation with a hand-written backward rule.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRows(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    MixRows {
        x: Var,
        partner: Vec<usize>,
        alpha: Vec<T>,
    },
    Sum(Var),
    SumSquares(Var),
    Bce {
        probs: Var,
        labels: Tensor<T>,
        eps: T,
    },
    SoftCrossEntropy {
        logits: Var,
        labels: Tensor<T>,
        softmax: Vec<T>,
    },
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        if !value.all_finite() && inputs.iter().all(|i| self.nodes[i.0].value.all_finite()) {
            panic!("non-finite output from finite inputs in {}", self.op_name(&op));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[cfg(debug_assertions)]
    fn op_name(&self, op: &Op<T>) -> String {
        match op {
            Op::Custom(c, _) => c.name().to_string(),
            Op::Leaf => "leaf".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::MatMulBt(..) => "matmul_bt".into(),
            Op::LayerNorm { .. } => "layer_norm".into(),
            Op::CausalAttention { .. } => "causal_attention".into(),
            Op::Bce { .. } => "bce".into(),
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy".into(),
            _ => "elementwise".into(),
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----- forward operations -------------------------------------------------

    /// `a * b` with `a` viewed as (rows x k) and `b` as (k x n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, av.data(), bv.data(), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T` with `a` (m x k) and `b` (n x k).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::dim("matmul_bt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, av.data(), bv.data(), &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulBt(a, b), &[a, b]))
    }

    /// Adds the rows of `b` cyclically to the rows of `a` (bias broadcast when
    /// `b` has a single row, positional tables when it has one row per token).
    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols, r) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != cols || r == 0 || rows % r != 0 {
            return Err(Error::dim("add_rows", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for i in 0..rows {
            let brow = bv.row(i % r);
            for (o, &b) in out.row_mut(i).iter_mut().zip(brow) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddRows(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
        let half = T::lit(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (each 1 x cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        for p in [gamma, beta] {
            if self.value(p).len() != cols {
                return Err(Error::dim("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let n = T::lit(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head causal self-attention core. `q`, `k`, `v` are
    /// (batch * tokens) x (heads * head_dim); token `i` attends to `j <= i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let qv = self.value(q);
        let (rows, width) = (qv.rows(), qv.cols());
        if tokens == 0 || heads == 0 || rows % tokens != 0 || width % heads != 0 {
            return Err(Error::dim("causal_attention", qv.shape(), &[tokens, heads]));
        }
        let (kv, vv) = (self.value(k), self.value(v));
        let dh = width / heads;
        let batch = rows / tokens;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * tokens * tokens];
        let mut out = vec![T::zero(); rows * width];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tokens {
                    let qi = &qd[(b * tokens + i) * width + off..][..dh];
                    let p = &mut probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &kd[(b * tokens + j) * width + off..][..dh];
                        let s = dot(qi, kj) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                    let mut z = T::zero();
                    for pj in p.iter_mut().take(i + 1) {
                        *pj = (*pj - max).exp();
                        z = z + *pj;
                    }
                    let o = &mut out[(b * tokens + i) * width + off..][..dh];
                    for j in 0..=i {
                        p[j] = p[j] / z;
                        let vj = &vd[(b * tokens + j) * width + off..][..dh];
                        for (oe, &ve) in o.iter_mut().zip(vj) {
                            *oe = *oe + p[j] * ve;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", &[], &[]))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::dim("concat_rows", self.shape(first), pv.shape()));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row `b` becomes `alpha[b] * x[b] + (1 - alpha[b]) * x[partner[b]]`.
    pub fn mix_rows(&mut self, x: Var, partner: &[usize], alpha: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        if partner.len() != rows || alpha.len() != rows || partner.iter().any(|&p| p >= rows) {
            return Err(Error::dim("mix_rows", xv.shape(), &[partner.len(), alpha.len()]));
        }
        let mut out = xv.clone();
        for b in 0..rows {
            let (a, other) = (alpha[b], xv.row(partner[b]));
            let own = xv.row(b);
            for ((o, &s), &t) in out.row_mut(b).iter_mut().zip(own).zip(other) {
                *o = a * s + (T::one() - a) * t;
            }
        }
        Ok(self.push(
            out,
            Op::MixRows {
                x,
                partner: partner.to_vec(),
                alpha: alpha.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Mean over rows of the per-row binary cross-entropy summed over columns.
    /// Probabilities are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, probs: Var, labels: &Tensor<T>, eps: T) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != labels.shape() {
            return Err(Error::dim("bce_multilabel", pv.shape(), labels.shape()));
        }
        let mut total = T::zero();
        for (&p, &y) in pv.data().iter().zip(labels.data()) {
            let p = p.max(eps).min(T::one() - eps);
            total = total - (y * p.ln() + (T::one() - y) * (T::one() - p).ln());
        }
        let value = Tensor::scalar(total / T::lit(pv.rows().max(1) as f64));
        Ok(self.push(
            value,
            Op::Bce {
                probs,
                labels: labels.clone(),
                eps,
            },
            &[probs],
        ))
    }

    /// `-(1/B) sum_b sum_j labels[b,j] * log softmax(logits[b])_j`.
    pub fn soft_cross_entropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != labels.shape() {
            return Err(Error::dim("soft_cross_entropy", lv.shape(), labels.shape()));
        }
        let (rows, cols) = (lv.rows(), lv.cols());
        let mut softmax = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for c in 0..cols {
                let logp = row[c] - lse;
                softmax[r * cols + c] = logp.exp();
                let y = labels.data()[r * cols + c];
                if y != T::zero() {
                    total = total - y * logp;
                }
            }
        }
        let value = Tensor::scalar(total / T::lit(rows.max(1) as f64));
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                labels: labels.clone(),
                softmax,
            },
            &[logits],
        ))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = op.forward(&values)?;
        Ok(self.push(value, Op::Custom(op, inputs.to_vec()), inputs))
    }

    // ----- backward -----------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm_nt(m, n, k, gd, bv.data(), ga, true);
                }
                if self.wants(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm_tn(k, m, n, av.data(), gd, gb, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm_nn(m, n, k, gd, bv.data(), ga, true);
                }
                if self.wants(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm_tn(n, m, k, gd, av.data(), gb, true);
                }
            }
            Op::AddRows(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                let (r, cols) = (self.value(*b).rows(), self.value(*b).cols());
                self.accumulate(grads, *b, |gb| {
                    for (i, grow) in gd.chunks(cols).enumerate() {
                        let dst = &mut gb[(i % r) * cols..][..cols];
                        add_into(dst, grow);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(gd) {
                        *d = *d - s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *d = *d + s * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(gd).zip(av) {
                        *d = *d + s * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(gd) {
                        *d = *d + s * *c;
                    }
                });
            }
            Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(gd).zip(xv) {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dth = (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        *d = *d + s * (half * (T::one() + th) + half * x * dth);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(gd).zip(yv) {
                        *d = *d + s * (T::one() - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(gd).zip(yv) {
                        *d = *d + s * y * (T::one() - y);
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(gd).zip(xv) {
                        let sign = if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = *d + s * sign;
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| add_into(ga, gd)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] = gg[c] + gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        add_into(gb, &gd[r * cols..][..cols]);
                    }
                });
                let n = T::lit(cols as f64);
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            let dh = gd[r * cols + c] * gam[c];
                            dxhat[c] = dh;
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[r * cols + c];
                        }
                        let f = inv_std[r] / n;
                        for c in 0..cols {
                            let v = f * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                            gx[r * cols + c] = gx[r * cols + c] + v;
                        }
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            } => self.attention_backward(grads, gd, *q, *k, *v, *tokens, *heads, probs),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let slice = &gd[offset..offset + n];
                    self.accumulate(grads, p, |gp| add_into(gp, slice));
                    offset += n;
                }
            }
            Op::MixRows { x, partner, alpha } => {
                let cols = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for (b, (&p, &a)) in partner.iter().zip(alpha).enumerate() {
                        for c in 0..cols {
                            let s = gd[b * cols + c];
                            gx[b * cols + c] = gx[b * cols + c] + a * s;
                            gx[p * cols + c] = gx[p * cols + c] + (T::one() - a) * s;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::SumSquares(a) => {
                let s = gd[0] + gd[0];
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for (d, &x) in ga.iter_mut().zip(xv) {
                        *d = *d + s * x;
                    }
                });
            }
            Op::Bce { probs, labels, eps } => {
                let pv = self.value(*probs);
                let scale = gd[0] / T::lit(pv.rows().max(1) as f64);
                let lo = *eps;
                let hi = T::one() - *eps;
                self.accumulate(grads, *probs, |gp| {
                    for ((d, &p), &y) in gp.iter_mut().zip(pv.data()).zip(labels.data()) {
                        if p > lo && p < hi {
                            *d = *d + scale * (-y / p + (T::one() - y) / (T::one() - p));
                        }
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let lv = self.value(*logits);
                let (rows, cols) = (lv.rows(), lv.cols());
                let scale = gd[0] / T::lit(rows.max(1) as f64);
                self.accumulate(grads, *logits, |gl| {
                    for r in 0..rows {
                        let lab = labels.row(r);
                        let mass: T = lab.iter().copied().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            gl[i] = gl[i] + scale * (softmax[i] * mass - lab[c]);
                        }
                    }
                });
            }
            Op::Custom(op, inputs) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let parts = op.backward(&values, &node.value, g);
                for (&inp, part) in inputs.iter().zip(parts) {
                    self.accumulate(grads, inp, |gi| add_into(gi, part.data()));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        gd: &[T],
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: &[T],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = (qv.rows(), qv.cols());
        let dh = width / heads;
        let batch = rows / tokens;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = vec![T::zero(); rows * width];
        let mut gk = vec![T::zero(); rows * width];
        let mut gv = vec![T::zero(); rows * width];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dp = vec![T::zero(); tokens];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tokens {
                    let p = &probs[((b * heads + h) * tokens + i) * tokens..][..tokens];
                    let go = &gd[(b * tokens + i) * width + off..][..dh];
                    let mut weighted = T::zero();
                    for j in 0..=i {
                        let vj = &vd[(b * tokens + j) * width + off..][..dh];
                        dp[j] = dot(go, vj);
                        weighted = weighted + p[j] * dp[j];
                        let gvj = &mut gv[(b * tokens + j) * width + off..][..dh];
                        for (d, &o) in gvj.iter_mut().zip(go) {
                            *d = *d + p[j] * o;
                        }
                    }
                    let qi_base = (b * tokens + i) * width + off;
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj_base = (b * tokens + j) * width + off;
                        for e in 0..dh {
                            gq[qi_base + e] = gq[qi_base + e] + ds * kd[kj_base + e];
                            gk[kj_base + e] = gk[kj_base + e] + ds * qd[qi_base + e];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, |d| add_into(d, &gq));
        self.accumulate(grads, k, |d| add_into(d, &gk));
        self.accumulate(grads, v, |d| add_into(d, &gv));
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut [T] {
        let shape = self.shape(v);
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.wants(v) {
            f(self.grad_buf(grads, v));
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Softmax of each row of `logits`.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let lse = log_sum_exp(logits.row(r));
        for v in out.row_mut(r) {
            *v = (*v - lse).exp();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 1.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn zero_times_x_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let z = tape.scale(x, 0.0);
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let m = tape.mul(x, c).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn shape_errors_name_both_operands() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[2, 2]));
        match tape.add(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn attention_first_token_copies_its_value() {
        let mut tape = Tape::new();
        let q = tape.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let k = tape.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.param(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let o = tape.causal_attention(q, k, v, 2, 1).unwrap();
        assert_eq!(tape.value(o).row(0), &[5.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&t(&[2, 3], &[1.0, 2.0, 3.0, -1e3, 0.0, 1e3]));
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
