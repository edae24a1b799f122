//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs are earlier nodes, so the node list
//! is already in topological order and [`Tape::backward`] is a single reverse
//! sweep. A node whose inputs all lack `requires_grad` is stored as a
//! constant and keeps no saved state.

use std::sync::Arc;

use super::counter::{self, Component};
use super::kernels::{self, RopeTable};
use super::{ensure_finite, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Sum { x: Var },
    AddBias { x: Var, bias: Var },
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    SoftmaxRows { x: Var },
    SwiGlu { gate: Var, up: Var },
    Gelu { x: Var },
    Rope { x: Var, n_heads: usize, pos0: usize, table: Arc<RopeTable<T>> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    CrossEntropy { logits: Var, targets: Vec<u32>, mask: Vec<bool>, probs: Vec<T>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records operations for one forward/backward pass.
///
/// A tape and its nodes are confined to one thread for one step.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, grad: bool, op: Op<T>) -> Result<Var> {
        ensure_finite(op_name, &value)?;
        let op = if grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value: value.with_requires_grad(grad),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        super::matrix_dims(op, self.value(v))
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(self.data(a), self.data(b), &mut out, m, k, n, false, false, false);
        let grad = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, grad, Op::MatMul { a, b, tb: false })
    }

    /// `a [m x k] * b^T` where `b` is stored `[n x k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.dim_err("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(self.data(a), self.data(b), &mut out, m, k, n, false, true, false);
        let grad = self.rg(a) || self.rg(b);
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, grad, Op::MatMul { a, b, tb: true })
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let grad = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::new(shape, out)?, grad, Op::Add { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let grad = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::new(shape, out)?, grad, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * s).collect();
        let grad = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("scale", Tensor::new(shape, out)?, grad, Op::Scale { x, s })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v;
        }
        let grad = self.rg(x);
        self.push("sum", Tensor::scalar(acc), grad, Op::Sum { x })
    }

    /// Adds a `[cols]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(self.dim_err("add_bias", x, bias));
        }
        let b = self.data(bias);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let grad = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        self.push("add_bias", Tensor::new(shape, out)?, grad, Op::AddBias { x, bias })
    }

    /// RMS normalization over the last dimension (epsilon 1e-6).
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d {
            return Err(self.dim_err("rms_norm", x, gain));
        }
        let (out, inv) = kernels::rms_norm_forward(self.data(x), self.data(gain), d, kernels::RMS_EPS);
        let grad = self.rg(x) || self.rg(gain);
        let shape = self.shape(x).to_vec();
        self.push("rms_norm", Tensor::new(shape, out)?, grad, Op::RmsNorm { x, gain, inv })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.data(x).to_vec();
        kernels::softmax_rows_inplace(&mut out, self.value(x).cols());
        let grad = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("softmax_rows", Tensor::new(shape, out)?, grad, Op::SoftmaxRows { x })
    }

    /// `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape("swiglu", gate, up)?;
        let out = kernels::swiglu_forward(self.data(gate), self.data(up));
        let grad = self.rg(gate) || self.rg(up);
        let shape = self.shape(gate).to_vec();
        self.push("swiglu", Tensor::new(shape, out)?, grad, Op::SwiGlu { gate, up })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let grad = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push("gelu", Tensor::new(shape, out)?, grad, Op::Gelu { x })
    }

    /// Rotary position embedding on `[t x d]` rows at positions `pos0..pos0+t`.
    pub fn rope(&mut self, x: Var, n_heads: usize, pos0: usize, table: &Arc<RopeTable<T>>) -> Result<Var> {
        let (t, d) = self.dims2("rope", x)?;
        if pos0 + t > table.max_positions() {
            return Err(Error::SequenceLength {
                len: pos0 + t,
                max: table.max_positions(),
            });
        }
        let mut out = self.data(x).to_vec();
        table.apply(&mut out, d, n_heads, pos0, false);
        let grad = self.rg(x);
        self.push(
            "rope",
            Tensor::new(vec![t, d], out)?,
            grad,
            Op::Rope {
                x,
                n_heads,
                pos0,
                table: Arc::clone(table),
            },
        )
    }

    /// Causal multi-head self-attention over `[t x d]` queries, keys and values.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (t, d) = self.dims2("attention", q)?;
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![t, d],
                rhs: vec![n_heads],
            });
        }
        let grad = self.rg(q) || self.rg(k) || self.rg(v);
        let (out, probs) = kernels::attention_forward(
            self.data(q),
            self.data(k),
            self.data(v),
            t,
            t,
            d,
            n_heads,
            0,
            grad,
        );
        self.push(
            "attention",
            Tensor::new(vec![t, d], out)?,
            grad,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs: probs.unwrap_or_default(),
            },
        )
    }

    /// Gathers rows of a `[vocab x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let grad = self.rg(table);
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], out)?,
            grad,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (_, d) = self.dims2("concat_rows", first)?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != d {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let grad = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, d], out)?,
            grad,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let grad = self.rg(x);
        self.push("slice_rows", out, grad, Op::SliceRows { x, start })
    }

    /// Mean negative log-likelihood over positions where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (t, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![t, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidBatch("no target positions in loss mask".into()));
        }
        for (&tgt, &on) in targets.iter().zip(mask) {
            if on && tgt as usize >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: tgt as usize,
                    size: vocab,
                });
            }
        }
        let (total, probs) = kernels::cross_entropy_forward(self.data(logits), vocab, targets, mask);
        let loss = total / T::of(count as f64);
        let grad = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            grad,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs: if grad { probs } else { Vec::new() },
                count,
            },
        )
    }

    /// Back-propagates from a scalar produced by taped ops, populating the
    /// gradient of every `requires_grad` leaf reachable from it. Fan-out
    /// contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(Error::Usage(
                "backward requires a loss produced by taped ops on tensors that require grad".into(),
            ));
        }
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        counter::with_component(Component::Other, || {
            for i in (0..=loss.0).rev() {
                let Some(dy) = grads[i].take() else { continue };
                if !self.nodes[i].value.requires_grad {
                    continue;
                }
                if let Op::Leaf = self.nodes[i].op {
                    self.nodes[i].value.grad = Some(dy);
                    continue;
                }
                self.backward_node(i, &dy, &mut grads);
            }
        });
        Ok(())
    }

    fn backward_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].value.requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len(v)]).as_mut_slice()
            }};
        }
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[i].value.cols();
                if rg(*a) {
                    // dA = dC * B^T  (or dC * B when B is stored transposed)
                    let da = acc!(*a);
                    kernels::matmul_into(dy, val(*b), da, m, n, k, false, !*tb, true);
                }
                if rg(*b) {
                    let db = acc!(*b);
                    if *tb {
                        kernels::matmul_into(dy, val(*a), db, n, m, k, true, false, true);
                    } else {
                        kernels::matmul_into(val(*a), dy, db, k, m, n, true, false, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        for (g, &d) in acc!(v).iter_mut().zip(dy) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bv = val(*b);
                    for (j, g) in acc!(*a).iter_mut().enumerate() {
                        *g += dy[j] * bv[j];
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    for (j, g) in acc!(*b).iter_mut().enumerate() {
                        *g += dy[j] * av[j];
                    }
                }
            }
            Op::Scale { x, s } => {
                for (g, &d) in acc!(*x).iter_mut().zip(dy) {
                    *g += d * *s;
                }
            }
            Op::Sum { x } => {
                for g in acc!(*x).iter_mut() {
                    *g += dy[0];
                }
            }
            Op::AddBias { x, bias } => {
                let cols = nodes[bias.0].value.numel();
                if rg(*x) {
                    for (g, &d) in acc!(*x).iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if rg(*bias) {
                    let gb = acc!(*bias);
                    for (j, &d) in dy.iter().enumerate() {
                        gb[j % cols] += d;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let d = nodes[x.0].value.cols();
                let mut dx = rg(*x).then(|| vec![T::zero(); len(*x)]);
                let mut dg = rg(*gain).then(|| vec![T::zero(); len(*gain)]);
                kernels::rms_norm_backward(val(*x), val(*gain), inv, dy, d, dx.as_deref_mut(), dg.as_deref_mut());
                if let Some(dx) = dx {
                    add_into(acc!(*x), &dx);
                }
                if let Some(dg) = dg {
                    add_into(acc!(*gain), &dg);
                }
            }
            Op::SoftmaxRows { x } => {
                let y = nodes[i].value.data();
                let cols = nodes[i].value.cols();
                let gx = acc!(*x);
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot += yr[j] * dr[j];
                    }
                    for j in 0..cols {
                        gx[r * cols + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::SwiGlu { gate, up } => {
                let mut dg = rg(*gate).then(|| vec![T::zero(); len(*gate)]);
                let mut du = rg(*up).then(|| vec![T::zero(); len(*up)]);
                kernels::swiglu_backward(val(*gate), val(*up), dy, dg.as_deref_mut(), du.as_deref_mut());
                if let Some(dg) = dg {
                    add_into(acc!(*gate), &dg);
                }
                if let Some(du) = du {
                    add_into(acc!(*up), &du);
                }
            }
            Op::Gelu { x } => {
                let xv = val(*x);
                for (j, g) in acc!(*x).iter_mut().enumerate() {
                    *g += dy[j] * kernels::gelu_grad(xv[j]);
                }
            }
            Op::Rope { x, n_heads, pos0, table } => {
                let d = nodes[x.0].value.cols();
                let mut dx = dy.to_vec();
                table.apply(&mut dx, d, *n_heads, *pos0, true);
                add_into(acc!(*x), &dx);
            }
            Op::Attention { q, k, v, n_heads, probs } => {
                let (t, d) = (nodes[q.0].value.rows(), nodes[q.0].value.cols());
                let mut dq = vec![T::zero(); t * d];
                let mut dk = vec![T::zero(); t * d];
                let mut dv = vec![T::zero(); t * d];
                kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    dy,
                    t,
                    d,
                    *n_heads,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if rg(var) {
                        add_into(acc!(var), &g);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.cols();
                let gt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for j in 0..d {
                        gt[id * d + j] += dy[r * d + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if rg(p) {
                        add_into(acc!(p), &dy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let d = nodes[x.0].value.cols();
                let gx = acc!(*x);
                add_into(&mut gx[start * d..start * d + dy.len()], dy);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = nodes[logits.0].value.cols();
                let scale = dy[0] / T::of(*count as f64);
                let gl = acc!(*logits);
                let mut k = 0;
                for (r, (&tgt, &on)) in targets.iter().zip(mask).enumerate() {
                    if !on {
                        continue;
                    }
                    let p = &probs[k * vocab..(k + 1) * vocab];
                    let row = &mut gl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        row[j] += scale * p[j];
                    }
                    row[tgt as usize] -= scale;
                    k += 1;
                }
            }
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
