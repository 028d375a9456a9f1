//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends one node holding its value and its operands.
//! [`ComputationTape::backward`] walks the nodes in exact reverse order and
//! returns an adjoint for every node reached from the loss. Parameters are
//! borrowed rather than copied, so one set of model weights can back any
//! number of tapes at once.

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`ComputationTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Var, Var),
    Row(Var, usize),
    AddRow(Var, Var),
    Stack(Vec<Var>),
    Softmax(Var),
    CrossEntropy(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Ordered record of primitive operations applied during a forward pass.
#[derive(Debug, Default)]
pub struct ComputationTape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Adjoints produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Adjoint of `var`, materialized as zeros when disconnected.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl<'p> ComputationTape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Registers a borrowed parameter tensor as a leaf.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Registers an owned tensor as a leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_owned(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push_owned(v, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_owned(v, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push_owned(v, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push_owned(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.push_owned(v, Op::Sigmoid(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push_owned(v, Op::Transpose(a))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat(self.value(b))?;
        Ok(self.push_owned(v, Op::Concat(a, b)))
    }

    /// Row lookup, used for embeddings.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let v = self.value(m).row(i)?;
        Ok(self.push_owned(v, Op::Row(m, i)))
    }

    /// Matrix plus a vector broadcast over its rows.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let v = self.value(m).add_row(self.value(row))?;
        Ok(self.push_owned(v, Op::AddRow(m, row)))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = rows.iter().map(|&r| self.value(r).clone()).collect();
        let v = Tensor::from_rows(&values)?;
        Ok(self.push_owned(v, Op::Stack(rows.to_vec())))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax()?;
        Ok(self.push_owned(v, Op::Softmax(a)))
    }

    /// Fused log-softmax and negative log-likelihood; yields a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits).cross_entropy(target)?;
        Ok(self.push_owned(Tensor::scalar(v), Op::CrossEntropy(logits, target)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push_owned(Tensor::scalar(v), Op::Sum(a))
    }

    /// Gradient of the scalar `loss` with respect to every node on the tape.
    ///
    /// The tape is left untouched, so repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], var: Var) -> &'g mut Tensor {
        grads[var.0].get_or_insert_with(|| Tensor::zeros(self.value(var).shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: &[f64]) {
        let slot = self.slot(grads, var);
        for (s, d) in slot.data_mut().iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn propagate(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.data());
                self.accumulate(grads, b, g.data());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.data());
                let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                self.accumulate(grads, b, &neg);
            }
            Op::Hadamard(a, b) => {
                let da = g.hadamard(self.value(b))?;
                let db = g.hadamard(self.value(a))?;
                self.accumulate(grads, a, da.data());
                self.accumulate(grads, b, db.data());
            }
            Op::Scale(a, k) => {
                let da: Vec<f64> = g.data().iter().map(|x| x * k).collect();
                self.accumulate(grads, a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(d, y)| d * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::MatMul(a, b) => self.matmul_backward(a, b, g, grads),
            Op::Transpose(a) => {
                let src = self.value(a);
                if src.rank() == 1 {
                    self.accumulate(grads, a, g.data());
                } else {
                    self.accumulate(grads, a, g.transpose().data());
                }
            }
            Op::Concat(a, b) => {
                let split = self.value(a).len();
                self.accumulate(grads, a, &g.data()[..split]);
                self.accumulate(grads, b, &g.data()[split..]);
            }
            Op::Row(m, i) => {
                let cols = self.value(m).cols();
                let slot = self.slot(grads, m);
                for (s, d) in slot.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(g.data()) {
                    *s += d;
                }
            }
            Op::AddRow(m, row) => {
                self.accumulate(grads, m, g.data());
                let cols = self.value(row).len();
                let mut col_sums = vec![0.0; cols];
                for chunk in g.data().chunks_exact(cols.max(1)) {
                    for (c, d) in col_sums.iter_mut().zip(chunk) {
                        *c += d;
                    }
                }
                self.accumulate(grads, row, &col_sums);
            }
            Op::Stack(ref rows) => {
                let cols = out.cols();
                for (k, &r) in rows.iter().enumerate() {
                    self.accumulate(grads, r, &g.data()[k * cols..(k + 1) * cols]);
                }
            }
            Op::Softmax(a) => {
                let inner = tensor::dot(g.data(), out.data());
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(d, y)| y * (d - inner))
                    .collect();
                self.accumulate(grads, a, &da);
            }
            Op::CrossEntropy(logits, target) => {
                let scale = g.data()[0];
                let mut probs = tensor::softmax(self.value(logits).data())?;
                probs[target] -= 1.0;
                for p in &mut probs {
                    *p *= scale;
                }
                self.accumulate(grads, logits, &probs);
            }
            Op::Sum(a) => {
                let scale = g.data()[0];
                let n = self.value(a).len();
                self.accumulate(grads, a, &vec![scale; n]);
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = (av.rows(), av.cols());
        let n = bv.cols();
        let (ad, bd, gd) = (av.data(), bv.data(), g.data());

        // dA = G·Bᵀ
        {
            let da = self.slot(grads, a).data_mut();
            for i in 0..m {
                let g_row = &gd[i * n..(i + 1) * n];
                for p in 0..k {
                    let b_row = &bd[p * n..(p + 1) * n];
                    da[i * k + p] += tensor::dot(g_row, b_row);
                }
            }
        }
        // dB = Aᵀ·G
        let db = self.slot(grads, b).data_mut();
        for i in 0..m {
            let g_row = &gd[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                    *d += a_ip * gv;
                }
            }
        }
    }
}

/// Checks that `var` holds a vector of length `len`.
pub(crate) fn expect_vector(tape: &ComputationTape<'_>, var: Var, len: usize, op: &'static str) -> Result<()> {
    let shape = tape.value(var).shape();
    if shape != [len] {
        return shape_err(op, shape, &[len]);
    }
    Ok(())
}
