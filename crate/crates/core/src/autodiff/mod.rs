//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward rule needs. Nodes are created in topological order, so
//! [`Tape::backward`] is a single reverse sweep. A node requires a gradient
//! iff it is a leaf marked `requires_grad` or one of its operands requires
//! one; backward rules skip operands that do not, which is what lets an
//! attack take input gradients without paying for parameter gradients.

mod conv;
mod norm;

pub use conv::Padding;
pub use norm::{BatchNormOutput, BatchNormState, BatchStats, NormMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: conv::ConvGeom },
    MaxPool2x2 { input: Var, argmax: Vec<u32> },
    Dense { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    Normalize { input: Var, inv_std: Vec<f32>, batch_stats: bool },
    ChannelAffine { input: Var, gamma: Var, beta: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Reshape { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
    Sum { input: Var },
    SquaredDistance { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all records so the tape can serve a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v` after [`Tape::backward`]; `None` if no gradient reached it.
    pub fn grad_data(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grad_data(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape tracks value")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|o| self.nodes[o.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(value, Op::Relu { input }, &[input])
    }

    /// `input[N, D] · weight[D, U] + bias[U]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::Shape(format!(
                "dense: input {xs:?}, weight {ws:?}, bias {bs:?} do not chain"
            )));
        }
        let (n, d, u) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0f32; n * u];
        let b = self.value(bias).data();
        for row in out.chunks_mut(u) {
            row.copy_from_slice(b);
        }
        conv::gemm(
            n,
            d,
            u,
            self.value(input).data(),
            (d, 1),
            self.value(weight).data(),
            (u, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::new([n, u], out).unwrap();
        Ok(self.push(value, Op::Dense { input, weight, bias }, &[input, weight, bias]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy: logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
        }
        let n = labels.len();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
            total += sum.ln() - (row[label] as f64 - max);
            probs.extend(row.iter().map(|&z| ((z as f64 - max).exp() / sum) as f32));
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(input, [n, rest])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum { input }, &[input])
    }

    /// `Σ (a − b)²` over all elements.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("squared_distance", a, b)?;
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| {
                let d = (p - q) as f64;
                d * d
            })
            .sum();
        Ok(self.push(Tensor::scalar(total as f32), Op::SquaredDistance { a, b }, &[a, b]))
    }

    /// Accumulates `d loss / d v` into the gradient buffer of every node that
    /// requires one. Gradients from multiple consumers sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let mut dx = wants(*input).then(|| take(grads, *input, nodes));
                let mut dk = wants(*kernel).then(|| take(grads, *kernel, nodes));
                let mut db = wants(*bias).then(|| take(grads, *bias, nodes));
                conv::conv2d_backward(
                    geom,
                    g,
                    nodes[input.0].value.data(),
                    nodes[kernel.0].value.data(),
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, [(*input, dx), (*kernel, dk), (*bias, db)]);
            }
            Op::MaxPool2x2 { input, argmax } => {
                if wants(*input) {
                    let dx = buf(grads, *input, nodes);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let xs = nodes[input.0].value.shape();
                let (n, d, u) = (xs[0], xs[1], nodes[weight.0].value.shape()[1]);
                if wants(*input) {
                    let w = nodes[weight.0].value.data();
                    conv::gemm(n, u, d, g, (u, 1), w, (1, u), buf(grads, *input, nodes), 1.0);
                }
                if wants(*weight) {
                    let x = nodes[input.0].value.data();
                    conv::gemm(d, n, u, x, (1, d), g, (u, 1), buf(grads, *weight, nodes), 1.0);
                }
                if wants(*bias) {
                    let db = buf(grads, *bias, nodes);
                    for row in g.chunks(u) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = nodes[input.0].value.data();
                    let dx = buf(grads, *input, nodes);
                    for ((acc, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::Normalize { input, inv_std, batch_stats } => {
                if wants(*input) {
                    let xhat = node.value.data();
                    let shape = node.value.shape();
                    norm::normalize_backward(
                        shape,
                        xhat,
                        inv_std,
                        *batch_stats,
                        g,
                        buf(grads, *input, nodes),
                    );
                }
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = &nodes[input.0].value;
                let gm = nodes[gamma.0].value.data();
                let mut dx = wants(*input).then(|| take(grads, *input, nodes));
                let mut dg = wants(*gamma).then(|| take(grads, *gamma, nodes));
                let mut db = wants(*beta).then(|| take(grads, *beta, nodes));
                norm::affine_backward(
                    x.shape(),
                    x.data(),
                    gm,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, [(*input, dx), (*gamma, dg), (*beta, db)]);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f32;
                    let dz = buf(grads, *logits, nodes);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dz[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if wants(*input) {
                    add_into(buf(grads, *input, nodes), g);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(buf(grads, v, nodes), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add_into(buf(grads, *a, nodes), g);
                }
                if wants(*b) {
                    for (acc, &gv) in buf(grads, *b, nodes).iter_mut().zip(g) {
                        *acc -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                for (dst, other) in [(*a, *b), (*b, *a)] {
                    if wants(dst) {
                        let o = nodes[other.0].value.data();
                        let acc = buf(grads, dst, nodes);
                        for ((acc, &ov), &gv) in acc.iter_mut().zip(o).zip(g) {
                            *acc += ov * gv;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if wants(*input) {
                    for (acc, &gv) in buf(grads, *input, nodes).iter_mut().zip(g) {
                        *acc += factor * gv;
                    }
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    for acc in buf(grads, *input, nodes).iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Op::SquaredDistance { a, b } => {
                let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                for (dst, sign) in [(*a, 2.0f32), (*b, -2.0f32)] {
                    if wants(dst) {
                        let acc = buf(grads, dst, nodes);
                        for ((acc, &p), &q) in acc.iter_mut().zip(x).zip(y) {
                            *acc += sign * g[0] * (p - q);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, zero-initialized on first touch.
fn buf<'a>(grads: &'a mut [Option<Vec<f32>>], v: Var, nodes: &[Node]) -> &'a mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

/// Moves a gradient buffer out so several operands can be written at once.
fn take(grads: &mut [Option<Vec<f32>>], v: Var, nodes: &[Node]) -> Vec<f32> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()])
}

fn restore<const K: usize>(grads: &mut [Option<Vec<f32>>], bufs: [(Var, Option<Vec<f32>>); K]) {
    for (v, b) in bufs {
        if let Some(b) = b {
            grads[v.0] = Some(b);
        }
    }
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}
