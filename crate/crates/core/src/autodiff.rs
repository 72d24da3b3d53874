//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] in execution order; the insertion
//! order is a valid topological order, so [`Tape::backward`] is a single
//! reverse sweep. A tape and its [`Var`] handles are confined to one thread;
//! independent tapes can run in parallel.
//!
//! ```
//! use hagmil::autodiff::Tape;
//! use hagmil::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::from_rows(&[&[1.0, -2.0, 3.0]]));
//! let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, -2.0, 3.0]);
//! ```

use std::cell::{Ref, RefCell};

use rand::Rng;

use crate::error::{HagError, Result};
use crate::ops;
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_kernel, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    Recip(usize),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    Transpose(usize),
    NarrowCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        ids: Vec<usize>,
    },
    SumAll(usize),
    MaxAll {
        x: usize,
        argmax: usize,
    },
    /// Fused scalar loss; `grad` is d(loss)/d(logits), computed in the forward pass.
    FusedLoss {
        logits: usize,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    tape_addr: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does
    /// not depend on it.
    pub fn get(&self, var: Var<'_>) -> Result<Option<&Tensor>> {
        if var.tape as *const Tape as usize != self.tape_addr {
            return Err(HagError::NotOnTape(var.id));
        }
        Ok(self.grads.get(var.id).and_then(|g| g.as_ref()))
    }

    /// Like [`get`](Self::get) but returns zeros for unreached variables.
    pub fn wrt(&self, var: Var<'_>) -> Result<Tensor> {
        match self.get(var)? {
            Some(g) => Ok(g.clone()),
            None => {
                let shape = var.shape();
                let n = shape.iter().product();
                Ok(Tensor::from_parts_unchecked(shape, vec![0.0; n]))
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(HagError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents(&op).iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(HagError::NotOnTape(loss.id));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(HagError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts_unchecked(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients {
            tape_addr: self as *const Tape as usize,
            grads,
        })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Recip(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Gelu(a)
        | Op::SoftmaxRows(a)
        | Op::Transpose(a)
        | Op::SumAll(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::NarrowCols { x, .. } | Op::GatherRows { x, .. } | Op::MaxAll { x, .. } => vec![*x],
        Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
        Op::FusedLoss { logits, .. } => vec![*logits],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, matmul_a_bt(g, bv.data(), n, m, k));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, matmul_at_b(av.data(), g, n, k, m));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            let d = out.cols();
            accumulate_with(grads, nodes, *b, |gb| {
                for row in g.chunks(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.iter().map(|v| v * c).collect());
        }
        Op::MulScalar(x, s) => {
            let sv = nodes[*s].value.item();
            let xv = nodes[*x].value.data();
            accumulate(grads, nodes, *x, g.iter().map(|v| v * sv).collect());
            let gs: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
            accumulate(grads, nodes, *s, vec![gs]);
        }
        Op::Recip(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(g, y)| -g * y * y).collect());
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(grads, nodes, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
        }
        Op::Gelu(a) => {
            let x = nodes[*a].value.data();
            accumulate(
                grads,
                nodes,
                *a,
                g.iter().zip(x).map(|(g, &x)| g * ops::gelu_grad_scalar(x)).collect(),
            );
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = out.cols();
            let gam = nodes[*gamma].value.data();
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; g.len()];
                for (r, (g_row, gx_row)) in g.chunks(d).zip(gx.chunks_mut(d)).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let gy: Vec<f64> = g_row.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let mean_gy = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy_xh = gy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx_row[j] = inv_std[r] * (gy[j] - mean_gy - xh[j] * mean_gy_xh);
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
            accumulate_with(grads, nodes, *gamma, |gg| {
                for (g_row, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += g_row[j] * xh[j];
                    }
                }
            });
            accumulate_with(grads, nodes, *beta, |gb| {
                for g_row in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += g_row[j];
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let d = out.cols();
            let mut gx = vec![0.0; g.len()];
            for ((y, g), gx) in out.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    gx[j] = y[j] * (g[j] - dot);
                }
            }
            accumulate(grads, nodes, *a, gx);
        }
        Op::Transpose(a) => {
            // g has the output shape (c×r); transpose back to r×c.
            let (r, c) = (out.cols(), out.rows());
            let mut gx = vec![0.0; g.len()];
            for i in 0..c {
                for j in 0..r {
                    gx[j * c + i] = g[i * r + j];
                }
            }
            accumulate(grads, nodes, *a, gx);
        }
        Op::NarrowCols { x, start } => {
            let width = out.cols();
            let full = nodes[*x].value.cols();
            accumulate_with(grads, nodes, *x, |gx| {
                for (r, g_row) in g.chunks(width).enumerate() {
                    for (j, v) in g_row.iter().enumerate() {
                        gx[r * full + start + j] += v;
                    }
                }
            });
        }
        Op::ConcatCols(xs) => {
            let total = out.cols();
            let mut offset = 0;
            for &x in xs {
                let w = nodes[x].value.cols();
                accumulate_with(grads, nodes, x, |gx| {
                    for (r, gx_row) in gx.chunks_mut(w).enumerate() {
                        for j in 0..w {
                            gx_row[j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x].value.len();
                accumulate(grads, nodes, x, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::GatherRows { x, ids } => {
            let d = out.cols();
            accumulate_with(grads, nodes, *x, |gx| {
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[k * d + j];
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let n = nodes[*a].value.len();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::MaxAll { x, argmax } => {
            let argmax = *argmax;
            accumulate_with(grads, nodes, *x, |gx| gx[argmax] += g[0]);
        }
        Op::FusedLoss { logits, grad } => {
            accumulate(grads, nodes, *logits, grad.iter().map(|v| v * g[0]).collect());
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> HagError {
    HagError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(HagError::NotOnTape(other.id))
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let a = self.value();
            let b = other.value();
            if a.cols() != b.rows() {
                return Err(mismatch("matmul", &a, &b));
            }
            let data = matmul_kernel(a.data(), b.data(), a.rows(), a.cols(), b.cols());
            Tensor::from_parts_unchecked(vec![a.rows(), b.cols()], data)
        };
        self.tape.push("matmul", value, Op::MatMul(self.id, other.id))
    }

    fn zip_same(self, other: Var<'t>, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(mismatch(op_name, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(other, "add", |a, b| a + b)?;
        self.tape.push("add", value, Op::Add(self.id, other.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add(other.scale(-1.0)?)
    }

    /// Elementwise (Hadamard) product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(other, "mul", |a, b| a * b)?;
        self.tape.push("mul", value, Op::Mul(self.id, other.id))
    }

    /// `self[n×d] + row[1×d]` broadcast over rows.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let value = {
            let a = self.value();
            let b = row.value();
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(mismatch("add_row", &a, &b));
            }
            let d = a.cols();
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(d) {
                for (x, y) in chunk.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::from_parts_unchecked(a.shape().to_vec(), data)
        };
        self.tape.push("add_row", value, Op::AddRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let value = self.map_values(|x| x * c);
        self.tape.push("scale", value, Op::Scale(self.id, c))
    }

    /// Multiplies every element by a `1×1` variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s)?;
        let value = {
            let sv = s.value();
            if sv.len() != 1 {
                return Err(mismatch("mul_scalar", &self.value(), &sv));
            }
            let c = sv.item();
            drop(sv);
            self.map_values(|x| x * c)
        };
        self.tape.push("mul_scalar", value, Op::MulScalar(self.id, s.id))
    }

    pub fn recip(self) -> Result<Var<'t>> {
        let value = self.map_values(|x| 1.0 / x);
        self.tape.push("recip", value, Op::Recip(self.id))
    }

    fn map_values(self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor::from_parts_unchecked(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let value = self.map_values(f64::tanh);
        self.tape.push("tanh", value, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let value = self.map_values(ops::sigmoid_scalar);
        self.tape.push("sigmoid", value, Op::Sigmoid(self.id))
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        let value = self.map_values(ops::gelu_scalar);
        self.tape.push("gelu", value, Op::Gelu(self.id))
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (value, xhat, inv_std) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let d = x.cols();
            if g.len() != d || b.len() != d {
                return Err(mismatch("layer_norm", &x, &g));
            }
            let (xhat, inv_std) = ops::normalize_rows(x.data(), d, eps);
            let mut out = xhat.clone();
            for row in out.chunks_mut(d) {
                for ((v, gj), bj) in row.iter_mut().zip(g.data()).zip(b.data()) {
                    *v = *v * gj + bj;
                }
            }
            (Tensor::from_parts_unchecked(x.shape().to_vec(), out), xhat, inv_std)
        };
        self.tape.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax over each row (last axis).
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let d = a.cols();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(d) {
                ops::softmax_in_place(row);
            }
            Tensor::from_parts_unchecked(a.shape().to_vec(), data)
        };
        self.tape.push("softmax_rows", value, Op::SoftmaxRows(self.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose();
        self.tape.push("transpose", value, Op::Transpose(self.id))
    }

    /// Columns `start..start + len`.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if start + len > a.cols() {
                return Err(HagError::IndexOutOfRange {
                    index: start + len,
                    len: a.cols(),
                });
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[start..start + len]);
            }
            Tensor::from_parts_unchecked(vec![a.rows(), len], data)
        };
        self.tape.push("narrow_cols", value, Op::NarrowCols { x: self.id, start })
    }

    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let value = self.value().gather_rows(ids)?;
        self.tape.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push("sum", value, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Maximum element as a `1×1`; ties resolve to the first occurrence.
    pub fn max(self) -> Result<Var<'t>> {
        let (argmax, m) = {
            let a = self.value();
            if a.is_empty() {
                return Err(HagError::Empty("max"));
            }
            a.data()
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) })
        };
        self.tape.push("max", Tensor::scalar(m), Op::MaxAll { x: self.id, argmax })
    }

    /// Smoothed-target cross-entropy on a `1×C` logit row.
    pub fn cross_entropy_smoothed(self, label: usize, epsilon: f64) -> Result<Var<'t>> {
        let (loss, grad) = ops::cross_entropy_smoothed_with_grad(self.value().data(), label, epsilon)?;
        self.tape.push(
            "cross_entropy_smoothed",
            Tensor::scalar(loss),
            Op::FusedLoss { logits: self.id, grad },
        )
    }

    /// Smooth top-1 SVM loss on a `1×C` logit row.
    pub fn smooth_top1_svm(self, label: usize, tau: f64, alpha: f64) -> Result<Var<'t>> {
        let (loss, grad) = ops::smooth_top1_svm_with_grad(self.value().data(), label, tau, alpha)?;
        self.tape
            .push("smooth_top1_svm", Tensor::scalar(loss), Op::FusedLoss { logits: self.id, grad })
    }

    /// Inverted dropout. `rng == None` means inference: identity.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: Option<&mut R>) -> Result<Var<'t>> {
        let Some(rng) = rng else { return Ok(self) };
        if p <= 0.0 {
            return Ok(self);
        }
        if p >= 1.0 {
            return Err(HagError::InvalidArgument(format!("dropout p={p} must be < 1")));
        }
        let shape = self.shape();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = self.tape.constant(Tensor::from_parts_unchecked(shape, mask));
        self.mul(mask)
    }
}

/// Concatenates along columns; all inputs must share a row count.
pub fn concat_cols<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = *xs.first().ok_or(HagError::Empty("concat_cols"))?;
    let tape = first.tape;
    let value = {
        let vals: Vec<_> = xs.iter().map(|x| x.value()).collect();
        let rows = vals[0].rows();
        for v in &vals {
            if v.rows() != rows {
                return Err(mismatch("concat_cols", &vals[0], v));
            }
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::from_parts_unchecked(vec![rows, total], data)
    };
    tape.push("concat_cols", value, Op::ConcatCols(xs.iter().map(|x| x.id).collect()))
}

/// Stacks along rows; all inputs must share a column count.
pub fn concat_rows<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = *xs.first().ok_or(HagError::Empty("concat_rows"))?;
    let tape = first.tape;
    let value = {
        let vals: Vec<_> = xs.iter().map(|x| x.value()).collect();
        let cols = vals[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &vals {
            if v.cols() != cols {
                return Err(mismatch("concat_rows", &vals[0], v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Tensor::from_parts_unchecked(vec![rows, cols], data)
    };
    tape.push("concat_rows", value, Op::ConcatRows(xs.iter().map(|x| x.id).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[&[1.5, -2.0, 0.25]]));
        let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(HagError::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.param(Tensor::scalar(1.0));
        let y = t2.param(Tensor::scalar(1.0));
        assert!(matches!(t1.backward(y), Err(HagError::NotOnTape(_))));
        let g = t1.backward(x).unwrap();
        assert!(g.get(y).is_err());
        assert!(x.add(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(x.mul(c).unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 3.0);
        assert!(g.get(c).unwrap().is_none());
    }

    #[test]
    fn reused_var_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.add(x).unwrap().mul(x).unwrap(); // 2x^2
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 12.0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        assert!(matches!(x.recip(), Err(HagError::NonFinite { op: "recip" })));
    }
}
