use std::borrow::Cow;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `(.., m, k) x (k, n)` with a shared right operand, or batched with
    /// identical leading dimensions.
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    Concat(Vec<Var>, usize),
    Embedding(Var, Vec<usize>),
    Dropout(Var, Vec<T>),
    CrossEntropy(Var, Vec<Option<usize>>),
    Sum(Var),
    Transpose(Var, usize, usize),
    Reshape(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::Embedding(a, _)
            | Op::Dropout(a, _)
            | Op::CrossEntropy(a, _)
            | Op::Sum(a)
            | Op::Transpose(a, _, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order. Leaves may borrow their tensors
/// (`'a`), which lets parameter stores be bound without copying.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let err = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
    if sa.len() < 2 || sb.len() < 2 {
        return Err(err());
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let lead = &sa[..sa.len() - 2];
    let shared_rhs = sb.len() == 2;
    if !shared_rhs && (sb.len() != sa.len() || &sb[..sb.len() - 2] != lead) {
        return Err(err());
    }
    if sb[sb.len() - 2] != k {
        return Err(err());
    }
    let n = sb[sb.len() - 1];
    let mut out = sa[..sa.len() - 1].to_vec();
    out.push(n);
    Ok((
        MatMulDims {
            batch: lead.iter().product(),
            m,
            k,
            n,
            shared_rhs,
        },
        out,
    ))
}

/// For a swap of axes `i` and `j`: output shape and, per output element, the
/// offset of its source element.
fn transpose_offsets(shape: &[usize], i: usize, j: usize) -> (Vec<usize>, Vec<usize>) {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    let mut src_strides = strides.clone();
    src_strides.swap(i, j);
    let total: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        offsets.push(idx.iter().zip(&src_strides).map(|(a, b)| a * b).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, offsets)
}

fn concat_layout(shapes: &[&[usize]], axis: usize) -> Result<(Vec<usize>, usize, Vec<usize>)> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.len() {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} for shape {first:?}"),
        ));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        let same_rank = s.len() == first.len();
        if !same_rank || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
            return Err(Error::shape(
                "concat",
                format!("{shapes:?} along axis {axis}"),
            ));
        }
        out[axis] += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let chunks = shapes.iter().map(|s| s[axis] * inner).collect();
    Ok((out, outer, chunks))
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push_owned(value, Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Leaf that borrows its value, e.g. a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(Cow::Borrowed(value), Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (d, out_shape) = matmul_dims(va.shape(), vb.shape())?;
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        for bi in 0..d.batch {
            let a_off = bi * d.m * d.k;
            let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
            for i in 0..d.m {
                let row = &mut out[(bi * d.m + i) * d.n..(bi * d.m + i + 1) * d.n];
                for p in 0..d.k {
                    let x = ad[a_off + i * d.k + p];
                    let brow = &bd[b_off + p * d.n..b_off + (p + 1) * d.n];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o = *o + x * y;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_owned(value, Op::MatMul(a, b)))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(
                op,
                format!("{sa:?} with {sb:?} (right operand must match trailing dimensions)"),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.broadcast_check(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `a + b`, where `b` may omit leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push_owned(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push_owned(v, Op::Sub(a, b)))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push_owned(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let v = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        self.push_owned(v, Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let v = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        )
        .expect("same shape");
        self.push_owned(v, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let cols = *va
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if cols == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_owned(v, Op::Softmax(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        let (out_shape, outer, chunks) = concat_layout(&shapes, axis)?;
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                data.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push_owned(v, Op::Concat(inputs.to_vec(), axis)))
    }

    /// Gathers rows of a `(vocab, dim)` table into `(ids.len(), dim)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() != 2 {
            return Err(Error::shape(
                "embedding",
                format!("table shape {:?}", vt.shape()),
            ));
        }
        let (rows, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::IdOutOfRange {
                    op: "embedding",
                    id,
                    size: rows,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let v = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push_owned(v, Op::Embedding(table, ids.to_vec())))
    }

    /// Inverted dropout. Outside training (or with `p == 0`) the input handle
    /// itself is returned, so evaluation is bitwise the identity.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::shape("dropout", format!("rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let va = self.value(a);
        let mask: Vec<T> = (0..va.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = va.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_owned(v, Op::Dropout(a, mask)))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `(rows, vocab)` logits. `None` targets (padding) are skipped. Per-row
    /// losses are summed in ascending order, so the result does not depend on
    /// row order.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.ndim() != 2 || vl.shape()[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", vl.shape(), targets.len()),
            ));
        }
        let vocab = vl.shape()[1];
        let mut losses = Vec::with_capacity(targets.len());
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::IdOutOfRange {
                    op: "cross_entropy",
                    id: t,
                    size: vocab,
                });
            }
            let row = vl.row(r);
            losses.push(log_sum_exp(row) - row[t]);
        }
        if losses.is_empty() {
            return Err(Error::Empty("cross_entropy targets"));
        }
        losses.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let count = T::lit(losses.len() as f64);
        let total = losses.into_iter().fold(T::zero(), |acc, x| acc + x);
        let v = Tensor::scalar(total / count);
        Ok(self.push_owned(v, Op::CrossEntropy(logits, targets.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push_owned(Tensor::scalar(total), Op::Sum(a))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let va = self.value(a);
        if i >= va.ndim() || j >= va.ndim() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({i}, {j}) for shape {:?}", va.shape()),
            ));
        }
        let (shape, offsets) = transpose_offsets(va.shape(), i, j);
        let data = offsets.iter().map(|&o| va.data()[o]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push_owned(v, Op::Transpose(a, i, j)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        Ok(self.push_owned(v, Op::Reshape(a)))
    }

    /// Back-propagates from a one-element `loss`, accumulating into the
    /// gradient of every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Only leaves accumulate across calls; interior gradients are per call.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (v, cg) in contributions {
                accumulate(&mut self.nodes[v.0], &cg);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (d, _) = matmul_dims(va.shape(), vb.shape()).expect("checked in forward");
                let (ad, bd) = (va.data(), vb.data());
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); ad.len()];
                    for bi in 0..d.batch {
                        let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
                        for i in 0..d.m {
                            let grow = &g[(bi * d.m + i) * d.n..(bi * d.m + i + 1) * d.n];
                            for p in 0..d.k {
                                let brow = &bd[b_off + p * d.n..b_off + (p + 1) * d.n];
                                let s = grow
                                    .iter()
                                    .zip(brow)
                                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                                ga[(bi * d.m + i) * d.k + p] = s;
                            }
                        }
                    }
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); bd.len()];
                    for bi in 0..d.batch {
                        let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
                        for i in 0..d.m {
                            let grow = &g[(bi * d.m + i) * d.n..(bi * d.m + i + 1) * d.n];
                            for p in 0..d.k {
                                let x = ad[(bi * d.m + i) * d.k + p];
                                let gbrow = &mut gb[b_off + p * d.n..b_off + (p + 1) * d.n];
                                for (o, &y) in gbrow.iter_mut().zip(grow) {
                                    *o = *o + x * y;
                                }
                            }
                        }
                    }
                    res.push((*b, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); self.value(*b).len()];
                    let nb = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + if negate { -x } else { x };
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let nb = vb.len();
                if self.wants(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * vb.data()[i % nb])
                        .collect();
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); nb];
                    for (i, (&x, &y)) in g.iter().zip(va.data()).enumerate() {
                        gb[i % nb] = gb[i % nb] + x * y;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Tanh(a) => res.push((
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&x, &y)| x * (T::one() - y * y))
                    .collect(),
            )),
            Op::Sigmoid(a) => res.push((
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(&x, &y)| x * y * (T::one() - y))
                    .collect(),
            )),
            Op::Exp(a) => res.push((*a, g.iter().zip(out.data()).map(|(&x, &y)| x * y).collect())),
            Op::Softmax(a) => {
                let cols = *out.shape().last().expect("non-scalar");
                let mut ga = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(cols).zip(out.data().chunks(cols)) {
                    let dot = grow
                        .iter()
                        .zip(yrow)
                        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    ga.extend(grow.iter().zip(yrow).map(|(&x, &y)| y * (x - dot)));
                }
                res.push((*a, ga));
            }
            Op::Concat(inputs, axis) => {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                let (_, outer, chunks) = concat_layout(&shapes, *axis).expect("checked");
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(&chunks) {
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            let base = o * total + start;
                            gv.extend_from_slice(&g[base..base + c]);
                        }
                        res.push((v, gv));
                    }
                    start += c;
                }
            }
            Op::Embedding(table, ids) => {
                let vt = self.value(*table);
                let dim = vt.shape()[1];
                let mut gt = vec![T::zero(); vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * dim..(id + 1) * dim];
                    for (o, &x) in dst.iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *o = *o + x;
                    }
                }
                res.push((*table, gt));
            }
            Op::Dropout(a, mask) => {
                res.push((*a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect()))
            }
            Op::CrossEntropy(logits, targets) => {
                let vl = self.value(*logits);
                let vocab = vl.shape()[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = g[0] / T::lit(count as f64);
                let mut gl = vec![T::zero(); vl.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let dst = &mut gl[r * vocab..(r + 1) * vocab];
                    dst.copy_from_slice(vl.row(r));
                    softmax_in_place(dst);
                    dst[t] = dst[t] - T::one();
                    for x in dst.iter_mut() {
                        *x = *x * scale;
                    }
                }
                res.push((*logits, gl));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::Transpose(a, i, j) => {
                let (_, offsets) = transpose_offsets(self.shape(*a), *i, *j);
                let mut ga = vec![T::zero(); g.len()];
                for (&o, &x) in offsets.iter().zip(g) {
                    ga[o] = x;
                }
                res.push((*a, ga));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
        }
        res
    }
}

fn accumulate<T: Real>(node: &mut Node<'_, T>, g: &[T]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s = row.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
