//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A `Tape` owns every intermediate value of one forward computation. Ops
//! append nodes and return `Val` handles (plain indices, `Copy`). `backward`
//! replays the tape in strict reverse execution order and returns a
//! `Gradients` store keyed by node; parameter gradients are looked up through
//! the leaf registry, so a parameter used in several places accumulates one
//! combined gradient. Frozen parameters enter the tape as constants and get
//! no gradient at all.
//!
//! Every op validates shapes and checks its output for non-finite values;
//! overflow surfaces as an error, never as a silent NaN.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Handle to a node on a specific tape. Only meaningful for the tape that
/// produced it; handles from a cleared tape are rejected by index checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Val(usize);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Named trainable tensor with a process-unique identity. The identity, not
/// the name, keys gradient lookup and optimizer state.
#[derive(Clone, Debug)]
pub struct Param<S> {
    id: u64,
    name: String,
    value: Tensor<S>,
    trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
    }

    pub fn unfreeze(&mut self) {
        self.trainable = true;
    }

    /// Replace the stored value (checkpoint load, adapter merge). Shape must
    /// be preserved; optimizer updates go through `Adam::step` instead, which
    /// asserts trainability.
    pub fn set_value(&mut self, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "param_set_value",
                format!("{}: {:?} vs {:?}", self.name, self.value.shape(), value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }

    /// In-place update used by the optimizer after its trainability assert.
    pub(crate) fn update_in_place(&mut self, f: impl FnMut(&mut [S])) {
        let mut g = f;
        g(self.value.data_mut());
    }
}

#[derive(Debug)]
enum Op<S> {
    Const,
    Input,
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, S),
    MatMul(Val, Val),
    Linear { x: Val, w: Val },
    Affine { x: Val, w: Val, b: Val },
    Silu(Val),
    ConcatLast(Vec<Val>),
    Embed { table: Val, indices: Vec<usize> },
    RepeatRows(Val),
    SumAll(Val),
    SquaredL2(Val, Val),
    RowSquaredL2(Val, Val),
    Clip { x: Val, lo: S, hi: S },
    StackScalars(Vec<Val>),
    LogSumExp(Val),
    CrossEntropy { logits: Val, labels: Vec<usize> },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Affine { .. } => "affine",
            Op::Silu(..) => "silu",
            Op::ConcatLast(..) => "concat_last",
            Op::Embed { .. } => "embed",
            Op::RepeatRows(..) => "repeat_rows",
            Op::SumAll(..) => "sum_all",
            Op::SquaredL2(..) => "squared_l2",
            Op::RowSquaredL2(..) => "row_squared_l2",
            Op::Clip { .. } => "clip",
            Op::StackScalars(..) => "stack_scalars",
            Op::LogSumExp(..) => "logsumexp",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradient store produced by one `backward` pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    param_nodes: HashMap<u64, Val>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. a tape value, if it received one.
    pub fn wrt(&self, v: Val) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a parameter. `None` for frozen or unused parameters.
    pub fn wrt_param(&self, p: &Param<S>) -> Option<&Tensor<S>> {
        self.param_nodes.get(&p.id).and_then(|&v| self.wrt(v))
    }
}

/// Arena for one forward computation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    leaves: HashMap<u64, Val>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    /// Drop all nodes and leaf registrations. Handles issued before the clear
    /// become invalid and are rejected by subsequent ops.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaves.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn check(&self, v: Val, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::invalid(op, "stale or foreign value handle"));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<Val> {
        if !value.all_finite() {
            return Err(Error::non_finite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Val(self.nodes.len() - 1))
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable data: inputs that never need a gradient, frozen
    /// coefficient tensors, noise draws.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Val> {
        self.push(t, Op::Const, false)
    }

    /// Differentiable input (attack entry point).
    pub fn input(&mut self, t: Tensor<S>) -> Result<Val> {
        self.push(t, Op::Input, true)
    }

    /// Register a parameter. Repeat registrations of the same parameter on
    /// one tape return the same node, so gradients accumulate additively.
    /// Frozen parameters become constants.
    pub fn leaf(&mut self, p: &Param<S>) -> Result<Val> {
        if let Some(&v) = self.leaves.get(&p.id) {
            return Ok(v);
        }
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable)?;
        self.leaves.insert(p.id, v);
        Ok(v)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check(a, "sub")?;
        self.check(b, "sub")?;
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Elementwise product, same shape only.
    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let out = self.value(a).mul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Val, c: S) -> Result<Val> {
        self.check(a, "scale")?;
        if !c.is_finite() {
            return Err(Error::invalid("scale", "non-finite factor"));
        }
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `y = x w^T` with `x` of shape `(n, in)` or `(in,)` and `w` `(out, in)`.
    pub fn linear(&mut self, x: Val, w: Val) -> Result<Val> {
        self.check(x, "linear")?;
        self.check(w, "linear")?;
        let out = affine_forward(self.value(x), self.value(w), None)?;
        let ng = self.needs(x) || self.needs(w);
        self.push(out, Op::Linear { x, w }, ng)
    }

    /// `y = x w^T + b` with `b` of shape `(out,)` broadcast over rows.
    pub fn affine(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        self.check(x, "affine")?;
        self.check(w, "affine")?;
        self.check(b, "affine")?;
        let out = affine_forward(self.value(x), self.value(w), Some(self.value(b)))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Affine { x, w, b }, ng)
    }

    pub fn silu(&mut self, x: Val) -> Result<Val> {
        self.check(x, "silu")?;
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// Concatenate along the last axis. All inputs rank 1, or all rank 2 with
    /// equal row counts.
    pub fn concat_last(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last", "no inputs"));
        }
        for &p in parts {
            self.check(p, "concat_last")?;
        }
        let rank = self.value(parts[0]).rank();
        if rank == 0 || rank > 2 {
            return Err(Error::shape("concat_last", format!("rank {}", rank)));
        }
        for &p in parts {
            if self.value(p).rank() != rank {
                return Err(Error::shape("concat_last", "mixed ranks"));
            }
        }
        let out = if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let d = data.len();
            Tensor::new(vec![d], data)?
        } else {
            let n = self.value(parts[0]).shape()[0];
            for &p in parts {
                if self.value(p).shape()[0] != n {
                    return Err(Error::shape("concat_last", "row counts differ"));
                }
            }
            let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![n, total], data)?
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatLast(parts.to_vec()), ng)
    }

    /// Row lookup: `table` is `(c, e)`, output is `(indices.len(), e)`.
    pub fn embed(&mut self, table: Val, indices: &[usize]) -> Result<Val> {
        self.check(table, "embed")?;
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embed", format!("table rank {}", t.rank())));
        }
        let (c, e) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * e);
        for &idx in indices {
            if idx >= c {
                return Err(Error::invalid(
                    "embed",
                    format!("index {} out of {} rows", idx, c),
                ));
            }
            data.extend_from_slice(t.row(idx));
        }
        let out = Tensor::new(vec![indices.len(), e], data)?;
        let ng = self.needs(table);
        self.push(
            out,
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    /// Tile a `(d,)` vector into `(n, d)` identical rows.
    pub fn repeat_rows(&mut self, x: Val, n: usize) -> Result<Val> {
        self.check(x, "repeat_rows")?;
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::shape("repeat_rows", format!("rank {}", v.rank())));
        }
        if n == 0 {
            return Err(Error::invalid("repeat_rows", "n must be positive"));
        }
        let d = v.shape()[0];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![n, d], data)?;
        let ng = self.needs(x);
        self.push(out, Op::RepeatRows(x), ng)
    }

    pub fn sum_all(&mut self, x: Val) -> Result<Val> {
        self.check(x, "sum_all")?;
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::SumAll(x), ng)
    }

    /// Mean over all elements.
    pub fn mean_all(&mut self, x: Val) -> Result<Val> {
        self.check(x, "mean_all")?;
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean_all", "empty tensor"));
        }
        let total = self.sum_all(x)?;
        self.scale(total, S::one() / s(n as f64))
    }

    /// `sum((a - b)^2)` over all elements, scalar output.
    pub fn squared_l2(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check(a, "squared_l2")?;
        self.check(b, "squared_l2")?;
        let diff = self.value(a).sub(self.value(b))?;
        let out = Tensor::scalar(diff.data().iter().map(|&x| x * x).sum());
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::SquaredL2(a, b), ng)
    }

    /// Per-row `sum((a - b)^2)` for rank-2 inputs, output `(n,)`.
    pub fn row_squared_l2(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check(a, "row_squared_l2")?;
        self.check(b, "row_squared_l2")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || va.shape() != vb.shape() {
            return Err(Error::shape(
                "row_squared_l2",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let n = va.shape()[0];
        let mut data = Vec::with_capacity(n);
        for r in 0..n {
            data.push(
                va.row(r)
                    .iter()
                    .zip(vb.row(r))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum(),
            );
        }
        let out = Tensor::new(vec![n], data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::RowSquaredL2(a, b), ng)
    }

    /// Elementwise clamp. Gradient passes through wherever the input lies
    /// inside `[lo, hi]` and is zero outside.
    pub fn clip(&mut self, x: Val, lo: S, hi: S) -> Result<Val> {
        self.check(x, "clip")?;
        if !(lo <= hi) {
            return Err(Error::invalid("clip", "lo > hi"));
        }
        let out = self.value(x).clamp(lo, hi);
        let ng = self.needs(x);
        self.push(out, Op::Clip { x, lo, hi }, ng)
    }

    /// Pack rank-0 values into a `(k,)` vector.
    pub fn stack_scalars(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::invalid("stack_scalars", "no inputs"));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p, "stack_scalars")?;
            if !self.value(p).is_scalar() {
                return Err(Error::shape("stack_scalars", "non-scalar input"));
            }
            data.push(self.value(p).scalar_value());
        }
        let out = Tensor::new(vec![parts.len()], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::StackScalars(parts.to_vec()), ng)
    }

    /// `log(sum(exp(x)))` of a rank-1 vector, max-shifted for stability.
    pub fn logsumexp(&mut self, x: Val) -> Result<Val> {
        self.check(x, "logsumexp")?;
        let v = self.value(x);
        if v.rank() != 1 || v.is_empty() {
            return Err(Error::shape("logsumexp", format!("{:?}", v.shape())));
        }
        let out = Tensor::scalar(logsumexp_slice(v.data()));
        let ng = self.needs(x);
        self.push(out, Op::LogSumExp(x), ng)
    }

    /// Mean cross-entropy of logits against integer labels. Logits `(n, c)`
    /// with `labels.len() == n`, or `(c,)` with one label. Softmax and log
    /// are fused and max-shifted.
    pub fn cross_entropy(&mut self, logits: Val, labels: &[usize]) -> Result<Val> {
        self.check(logits, "cross_entropy")?;
        let v = self.value(logits);
        let (n, c) = match v.rank() {
            1 => (1, v.shape()[0]),
            2 => (v.shape()[0], v.shape()[1]),
            r => return Err(Error::shape("cross_entropy", format!("rank {}", r))),
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if n == 0 {
            return Err(Error::invalid("cross_entropy", "empty batch"));
        }
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {} out of {} classes", label, c),
                ));
            }
            let row = &v.data()[r * c..(r + 1) * c];
            total = total + logsumexp_slice(row) - row[label];
        }
        let out = Tensor::scalar(total / s(n as f64));
        let ng = self.needs(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar loss. Returns gradients for every node that
    /// both influences the loss and needs one; frozen parameters and
    /// constants are absent.
    pub fn backward(&self, loss: Val) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "stale or foreign value handle"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}, expected scalar", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(S::one()));
        }
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].clone().expect("checked above");
            self.propagate(i, &g, &mut grads)?;
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::non_finite("backward"));
            }
        }
        Ok(Gradients {
            grads,
            param_nodes: self.leaves.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<S>>],
        target: Val,
        delta: Tensor<S>,
    ) -> Result<()> {
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        debug_assert_eq!(self.nodes[target.0].value.shape(), delta.shape());
        grads[target.0] = Some(match grads[target.0].take() {
            Some(g) => g.add(&delta)?,
            None => delta,
        });
        Ok(())
    }

    fn propagate(
        &self,
        idx: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Input | Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-S::one()))?;
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.scale(*c))?;
            }
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.value(*b).transpose()?)?;
                let gb = self.value(*a).transpose()?.matmul(g)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Linear { x, w } => {
                let (gx, gw, _) = affine_backward(g, self.value(*x), self.value(*w))?;
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *w, gw)?;
            }
            Op::Affine { x, w, b } => {
                let (gx, gw, gb) = affine_backward(g, self.value(*x), self.value(*w))?;
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *w, gw)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Silu(x) => {
                let d = self.value(*x).map(|v| {
                    let sg = sigmoid(v);
                    sg * (S::one() + v * (S::one() - sg))
                });
                self.accumulate(grads, *x, g.mul(&d)?)?;
            }
            Op::ConcatLast(parts) => {
                let rank = self.value(parts[0]).rank();
                if rank == 1 {
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.value(p).shape()[0];
                        let slice = g.data()[offset..offset + d].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![d], slice)?)?;
                        offset += d;
                    }
                } else {
                    let n = self.value(parts[0]).shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.value(p).shape()[1];
                        let mut data = Vec::with_capacity(n * d);
                        for r in 0..n {
                            data.extend_from_slice(&g.row(r)[offset..offset + d]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, d], data)?)?;
                        offset += d;
                    }
                }
            }
            Op::Embed { table, indices } => {
                let t = self.value(*table);
                let (c, e) = (t.shape()[0], t.shape()[1]);
                let mut gt = vec![S::zero(); c * e];
                for (r, &idx) in indices.iter().enumerate() {
                    for (j, &gv) in g.row(r).iter().enumerate() {
                        gt[idx * e + j] = gt[idx * e + j] + gv;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(vec![c, e], gt)?)?;
            }
            Op::RepeatRows(x) => {
                let d = self.value(*x).shape()[0];
                let n = node.value.shape()[0];
                let mut gx = vec![S::zero(); d];
                for r in 0..n {
                    for (j, &gv) in g.row(r).iter().enumerate() {
                        gx[j] = gx[j] + gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![d], gx)?)?;
            }
            Op::SumAll(x) => {
                let gs = g.scalar_value();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, gs))?;
            }
            Op::SquaredL2(a, b) => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let two_g = g.scalar_value() * s(2.0);
                self.accumulate(grads, *a, diff.scale(two_g))?;
                self.accumulate(grads, *b, diff.scale(-two_g))?;
            }
            Op::RowSquaredL2(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (n, d) = (va.shape()[0], va.shape()[1]);
                let mut ga = vec![S::zero(); n * d];
                for r in 0..n {
                    let gr = g.at(r) * s(2.0);
                    for j in 0..d {
                        ga[r * d + j] = gr * (va.row(r)[j] - vb.row(r)[j]);
                    }
                }
                let ga = Tensor::new(vec![n, d], ga)?;
                self.accumulate(grads, *b, ga.scale(-S::one()))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Clip { x, lo, hi } => {
                let mask = self.value(*x).map(|v| {
                    if v >= *lo && v <= *hi {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                self.accumulate(grads, *x, g.mul(&mask)?)?;
            }
            Op::StackScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, Tensor::scalar(g.at(i)))?;
                }
            }
            Op::LogSumExp(x) => {
                let v = self.value(*x);
                let gs = g.scalar_value();
                let sm = softmax_slice(v.data());
                let gx: Vec<S> = sm.into_iter().map(|p| p * gs).collect();
                self.accumulate(grads, *x, Tensor::new(vec![v.len()], gx)?)?;
            }
            Op::CrossEntropy { logits, labels } => {
                let v = self.value(*logits);
                let (n, c) = match v.rank() {
                    1 => (1, v.shape()[0]),
                    _ => (v.shape()[0], v.shape()[1]),
                };
                let gs = g.scalar_value() / s(n as f64);
                let mut gl = vec![S::zero(); n * c];
                for (r, &label) in labels.iter().enumerate() {
                    let sm = softmax_slice(&v.data()[r * c..(r + 1) * c]);
                    for (j, p) in sm.into_iter().enumerate() {
                        let onehot = if j == label { S::one() } else { S::zero() };
                        gl[r * c + j] = gs * (p - onehot);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(v.shape().to_vec(), gl)?)?;
            }
        }
        Ok(())
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn logsumexp_slice<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().fold(xs[0], |m, &x| if x > m { x } else { m });
    let total: S = xs.iter().map(|&x| (x - m).exp()).sum();
    m + total.ln()
}

fn softmax_slice<S: Scalar>(xs: &[S]) -> Vec<S> {
    let m = xs.iter().fold(xs[0], |m, &x| if x > m { x } else { m });
    let exps: Vec<S> = xs.iter().map(|&x| (x - m).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Forward for `linear`/`affine`: rank-1 inputs are treated as a single row.
fn affine_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if w.rank() != 2 {
        return Err(Error::shape("affine", format!("weight rank {}", w.rank())));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let (n, vec_in) = match x.rank() {
        1 => (1, true),
        2 => (x.shape()[0], false),
        r => return Err(Error::shape("affine", format!("input rank {}", r))),
    };
    let x_in = if vec_in { x.shape()[0] } else { x.shape()[1] };
    if x_in != in_dim {
        return Err(Error::shape(
            "affine",
            format!("input width {} vs weight {:?}", x_in, w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} vs weight {:?}", b.shape(), w.shape()),
            ));
        }
    }
    let mut out = vec![S::zero(); n * out_dim];
    let xd = x.data();
    let wd = w.data();
    for r in 0..n {
        let xrow = &xd[r * in_dim..(r + 1) * in_dim];
        let orow = &mut out[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = S::zero();
            for j in 0..in_dim {
                acc = acc + xrow[j] * wrow[j];
            }
            orow[o] = match b {
                Some(b) => acc + b.at(o),
                None => acc,
            };
        }
    }
    let shape = if vec_in {
        vec![out_dim]
    } else {
        vec![n, out_dim]
    };
    Tensor::new(shape, out)
}

/// Gradients for `linear`/`affine`: `(gx, gw, gb)` where `gb` is the row sum.
fn affine_backward<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let (n, vec_in) = match x.rank() {
        1 => (1, true),
        _ => (x.shape()[0], false),
    };
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    let mut gx = vec![S::zero(); n * in_dim];
    let mut gw = vec![S::zero(); out_dim * in_dim];
    let mut gb = vec![S::zero(); out_dim];
    for r in 0..n {
        let grow = &gd[r * out_dim..(r + 1) * out_dim];
        let xrow = &xd[r * in_dim..(r + 1) * in_dim];
        let gxrow = &mut gx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let go = grow[o];
            gb[o] = gb[o] + go;
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let gwrow = &mut gw[o * in_dim..(o + 1) * in_dim];
            for j in 0..in_dim {
                gxrow[j] = gxrow[j] + go * wrow[j];
                gwrow[j] = gwrow[j] + go * xrow[j];
            }
        }
    }
    let gx_shape = if vec_in {
        vec![in_dim]
    } else {
        vec![n, in_dim]
    };
    Ok((
        Tensor::new(gx_shape, gx)?,
        Tensor::new(vec![out_dim, in_dim], gw)?,
        Tensor::new(vec![out_dim], gb)?,
    ))
}
