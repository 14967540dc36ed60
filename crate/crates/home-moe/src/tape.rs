//! Reverse-mode automatic differentiation over a computation tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the output tensor plus enough saved state to replay the chain rule in
//! reverse. [`Tape::backward`] walks the nodes once, newest to oldest,
//! accumulating gradients additively wherever a tensor feeds several
//! consumers, and deposits the result in each requires-grad tensor.
//!
//! The op set is exactly what the mixture-of-experts architectures need:
//! matmul, bias add, elementwise add/mul, relu/sigmoid/swish, row softmax,
//! batch normalization, concatenation, gate-weighted expert sums, and the
//! binary cross-entropy reduction.

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_raw, sigmoid, transpose_raw, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Swish,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    /// Exact derivative. swish' = σ(x) + x·σ(x)·(1−σ(x)).
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

/// Forward execution mode.
///
/// `Train` uses batch statistics in batch norm and updates the running
/// statistics. `Frozen` uses batch statistics but leaves the running state
/// untouched (gradient verification re-evaluates the same forward many
/// times). `Infer` uses the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Frozen,
    Infer,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::Frozen)
    }
}

/// Running statistics for one batch-norm site. The trainable scale/shift
/// live outside as ordinary parameters; this is the non-trainable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.99,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Activate {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    WeightedSum {
        weights: Var,
        experts: Vec<Var>,
    },
    SumAll {
        x: Var,
    },
    BceMean {
        pred: Var,
        labels: Vec<f64>,
        eps: f64,
    },
}

/// Ordered record of one forward pass.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.values[v.0].requires_grad()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if the node is
    /// not grad-tracked or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    /// Record a non-trainable input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// Record a trainable leaf; data is copied onto the tape and the node is
    /// grad-tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec());
        copy.set_requires_grad(true);
        self.push(copy, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let mut t = Tensor::matrix(m, n, out);
        t.set_requires_grad(self.requires(a) || self.requires(b));
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let mut t = Tensor::from_vec(ta.shape().to_vec(), data);
        t.set_requires_grad(self.requires(a) || self.requires(b));
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// `x + bias` with `x: [B×n]` and `bias: [n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.len() != tx.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let mut t = Tensor::from_vec(tx.shape().to_vec(), data);
        t.set_requires_grad(self.requires(x) || self.requires(bias));
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let mut t = Tensor::from_vec(ta.shape().to_vec(), data);
        t.set_requires_grad(self.requires(a) || self.requires(b));
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let mut t = Tensor::from_vec(tx.shape().to_vec(), data);
        t.set_requires_grad(self.requires(x));
        self.push(t, Op::Scale { x, c })
    }

    pub fn activate(&mut self, kind: Activation, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let mut t = Tensor::from_vec(tx.shape().to_vec(), data);
        t.set_requires_grad(self.requires(x));
        self.push(t, Op::Activate { x, kind })
    }

    /// Row softmax with max-subtraction; 1-D input is treated as one row.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: "non-empty last axis",
                got: tx.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let mut t = Tensor::from_vec(tx.shape().to_vec(), data);
        t.set_requires_grad(self.requires(x));
        Ok(self.push(t, Op::Softmax { x }))
    }

    /// Batch normalization of `x: [B×D]` with trainable `gamma`/`beta`
    /// (`[D]` each). Train mode requires `B ≥ 2`, normalizes with the biased
    /// batch variance, and updates the running statistics as
    /// `new = m·old + (1−m)·batch`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(TensorError::BadShape {
                op: "batch_norm",
                expected: "2-D input",
                got: tx.shape().to_vec(),
            });
        }
        let (b, d) = (tx.rows(), tx.cols());
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                left: tx.shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        if mode.uses_batch_stats() && b < 2 {
            return Err(TensorError::DegenerateBatch(b));
        }

        let (mean, var) = if mode.uses_batch_stats() {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for row in tx.data().chunks(d) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= b as f64;
            }
            for row in tx.data().chunks(d) {
                for j in 0..d {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            for v in var.iter_mut() {
                *v /= b as f64;
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        for (i, v) in tx.data().iter().enumerate() {
            let j = i % d;
            xhat[i] = (v - mean[j]) * inv_std[j];
        }
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| g[i % d] * v + be[i % d])
            .collect();

        if mode == Mode::Train {
            let m = state.momentum;
            for j in 0..d {
                state.running_mean[j] = m * state.running_mean[j] + (1.0 - m) * mean[j];
                state.running_var[j] = m * state.running_var[j] + (1.0 - m) * var[j];
            }
        }

        let mut t = Tensor::matrix(b, d, out);
        t.set_requires_grad(self.requires(x) || self.requires(gamma) || self.requires(beta));
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode.uses_batch_stats(),
            },
        ))
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ArityMismatch {
                op: "concat",
                expected: 1,
                got: 0,
            });
        }
        let first = self.value(parts[0]);
        if first.shape().len() != 2 || axis > 1 {
            return Err(TensorError::BadShape {
                op: "concat",
                expected: "2-D inputs with axis 0 or 1",
                got: first.shape().to_vec(),
            });
        }
        let fixed = if axis == 1 {
            first.rows()
        } else {
            first.cols()
        };
        for v in parts {
            let t = self.value(*v);
            let other = if axis == 1 { t.rows() } else { t.cols() };
            if t.shape().len() != 2 || other != fixed {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let (rows, cols, data) = if axis == 1 {
            let rows = fixed;
            let cols: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in parts {
                    let t = self.value(*v);
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            (rows, cols, data)
        } else {
            let cols = fixed;
            let rows: usize = parts.iter().map(|v| self.value(*v).rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in parts {
                data.extend_from_slice(self.value(*v).data());
            }
            (rows, cols, data)
        };
        let mut t = Tensor::matrix(rows, cols, data);
        t.set_requires_grad(parts.iter().any(|v| self.requires(*v)));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Gate-weighted mixture: `out[b] = Σᵢ weights[b,i] · experts[i][b]`,
    /// with `weights: [B×N]` and every expert `[B×D]`.
    pub fn weighted_sum(&mut self, weights: Var, experts: &[Var]) -> Result<Var, TensorError> {
        let tw = self.value(weights);
        if tw.shape().len() != 2 || tw.cols() != experts.len() {
            return Err(TensorError::ArityMismatch {
                op: "weighted_sum",
                expected: if tw.shape().len() == 2 { tw.cols() } else { 0 },
                got: experts.len(),
            });
        }
        let (b, n) = (tw.rows(), tw.cols());
        let first = self.value(experts[0]);
        let d = first.cols();
        for e in experts {
            let t = self.value(*e);
            if t.shape() != [b, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    left: vec![b, d],
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; b * d];
        for (i, e) in experts.iter().enumerate() {
            let te = self.value(*e);
            for r in 0..b {
                let w = tw.data()[r * n + i];
                if w == 0.0 {
                    continue;
                }
                let erow = &te.data()[r * d..(r + 1) * d];
                let orow = &mut out[r * d..(r + 1) * d];
                for (o, &v) in orow.iter_mut().zip(erow) {
                    *o += w * v;
                }
            }
        }
        let mut t = Tensor::matrix(b, d, out);
        t.set_requires_grad(self.requires(weights) || experts.iter().any(|e| self.requires(*e)));
        Ok(self.push(
            t,
            Op::WeightedSum {
                weights,
                experts: experts.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().sum();
        let mut t = Tensor::scalar(s);
        t.set_requires_grad(self.requires(x));
        self.push(t, Op::SumAll { x })
    }

    /// Mean binary cross-entropy of one prediction column against {0,1}
    /// labels: `−Σ_b [y·ln p̃ + (1−y)·ln(1−p̃)] / B` with `p̃ = clamp(p, ε, 1−ε)`.
    pub fn bce_mean(&mut self, pred: Var, labels: &[f64], eps: f64) -> Result<Var, TensorError> {
        let tp = self.value(pred);
        if tp.len() != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_mean",
                left: tp.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(TensorError::InvalidLabel(*bad));
        }
        let b = labels.len() as f64;
        let mut sum = 0.0;
        for (p, y) in tp.data().iter().zip(labels) {
            let pc = p.clamp(eps, 1.0 - eps);
            sum -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let mut t = Tensor::scalar(sum / b);
        t.set_requires_grad(self.requires(pred));
        Ok(self.push(
            t,
            Op::BceMean {
                pred,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Every grad-tracked node reachable
    /// from `loss` receives its total derivative; gradients accumulate
    /// additively across consumers. Unreachable nodes keep `grad = None`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.values[i].requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if self.values[i].requires_grad() {
                self.values[i].set_grad(g);
            }
        }
        Ok(())
    }

    fn accumulate_parents(&self, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Adds this node's contribution to each grad-tracked parent.
        let add_to = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.values[v.0].requires_grad() {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.values[v.0].len()]);
            contrib(buf);
        };
        match &self.ops[node] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ta = &self.values[a.0];
                let tb = &self.values[b.0];
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                add_to(grads, *a, &|buf| {
                    let bt = transpose_raw(tb.data(), k, n);
                    for (o, v) in buf.iter_mut().zip(matmul_raw(g, &bt, m, n, k)) {
                        *o += v;
                    }
                });
                add_to(grads, *b, &|buf| {
                    let at = transpose_raw(ta.data(), m, k);
                    for (o, v) in buf.iter_mut().zip(matmul_raw(&at, g, k, m, n)) {
                        *o += v;
                    }
                });
            }
            Op::Add { a, b } => {
                add_to(grads, *a, &|buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                add_to(grads, *b, &|buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let n = self.values[bias.0].len();
                add_to(grads, *x, &|buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                add_to(grads, *bias, &|buf| {
                    for (i, v) in g.iter().enumerate() {
                        buf[i % n] += v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ta = &self.values[a.0];
                let tb = &self.values[b.0];
                add_to(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * tb.data()[i];
                    }
                });
                add_to(grads, *b, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ta.data()[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                add_to(grads, *x, &|buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += c * v;
                    }
                });
            }
            Op::Activate { x, kind } => {
                let tx = &self.values[x.0];
                add_to(grads, *x, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * kind.derivative(tx.data()[i]);
                    }
                });
            }
            Op::Softmax { x } => {
                let y = &self.values[node];
                let n = *y.shape().last().expect("softmax output");
                add_to(grads, *x, &|buf| {
                    for r in 0..y.len() / n {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            buf[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let b = xhat.len() / d;
                let gm = &self.values[gamma.0];
                add_to(grads, *beta, &|buf| {
                    for (i, v) in g.iter().enumerate() {
                        buf[i % d] += v;
                    }
                });
                add_to(grads, *gamma, &|buf| {
                    for (i, v) in g.iter().enumerate() {
                        buf[i % d] += v * xhat[i];
                    }
                });
                add_to(grads, *x, &|buf| {
                    if *batch_stats {
                        // dX = γ·is/B · (B·dY − Σ_b dY − x̂·Σ_b(dY⊙x̂)) per column.
                        let mut sum_g = vec![0.0; d];
                        let mut sum_gx = vec![0.0; d];
                        for (i, v) in g.iter().enumerate() {
                            sum_g[i % d] += v;
                            sum_gx[i % d] += v * xhat[i];
                        }
                        let bf = b as f64;
                        for i in 0..buf.len() {
                            let j = i % d;
                            buf[i] += gm.data()[j] * inv_std[j] / bf
                                * (bf * g[i] - sum_g[j] - xhat[i] * sum_gx[j]);
                        }
                    } else {
                        for i in 0..buf.len() {
                            let j = i % d;
                            buf[i] += g[i] * gm.data()[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 1 {
                    let rows = self.values[node].rows();
                    let total = self.values[node].cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.values[p.0].cols();
                        let off = offset;
                        add_to(grads, *p, &|buf| {
                            for r in 0..rows {
                                for j in 0..c {
                                    buf[r * c + j] += g[r * total + off + j];
                                }
                            }
                        });
                        offset += c;
                    }
                } else {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.values[p.0].len();
                        let off = offset;
                        add_to(grads, *p, &|buf| {
                            for j in 0..len {
                                buf[j] += g[off + j];
                            }
                        });
                        offset += len;
                    }
                }
            }
            Op::WeightedSum { weights, experts } => {
                let tw = &self.values[weights.0];
                let (b, n) = (tw.rows(), tw.cols());
                let d = self.values[experts[0].0].cols();
                add_to(grads, *weights, &|buf| {
                    for (i, e) in experts.iter().enumerate() {
                        let te = &self.values[e.0];
                        for r in 0..b {
                            let mut dot = 0.0;
                            for j in 0..d {
                                dot += g[r * d + j] * te.data()[r * d + j];
                            }
                            buf[r * n + i] += dot;
                        }
                    }
                });
                for (i, e) in experts.iter().enumerate() {
                    add_to(grads, *e, &|buf| {
                        for r in 0..b {
                            let w = tw.data()[r * n + i];
                            for j in 0..d {
                                buf[r * d + j] += w * g[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                add_to(grads, *x, &|buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::BceMean { pred, labels, eps } => {
                let tp = &self.values[pred.0];
                let b = labels.len() as f64;
                add_to(grads, *pred, &|buf| {
                    for (i, (p, y)) in tp.data().iter().zip(labels).enumerate() {
                        if *p < *eps || *p > 1.0 - *eps {
                            continue; // clamped: locally constant
                        }
                        buf[i] += g[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / b;
                    }
                });
            }
        }
    }
}

/// Central finite differences of a scalar function, coordinate by
/// coordinate: `(f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h`. The independent oracle used
/// throughout to verify [`Tape::backward`].
pub fn finite_diff_grad<F>(mut f: F, theta: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad needs h > 0");
    let mut out = vec![0.0; theta.len()];
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::from_vec(theta.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]));
        let m = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1., 2.]));
        let b = tape.constant(Tensor::matrix(2, 1, vec![3., 4.]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = rand_tensor(&mut rng, vec![3, 4]);
        let b0 = rand_tensor(&mut rng, vec![4, 2]);

        let mut tape = Tape::new();
        let a = tape.param(&a0);
        let b = tape.param(&b0);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();

        let fd = finite_diff_grad(
            |t| {
                let mut tp = Tape::new();
                let av = tp.constant(t.clone());
                let bv = tp.constant(b0.clone());
                let c = tp.matmul(av, bv).unwrap();
                let l = tp.sum_all(c);
                tp.value(l).item()
            },
            &a0,
            1e-5,
        );
        for (g, f) in tape.grad(a).unwrap().iter().zip(fd.data()) {
            assert!(rel_err(*g, *f) < 1e-6, "{g} vs {f}");
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Swish.apply(0.0), 0.0);
        assert!((Activation::Swish.apply(1.0) - 0.731059).abs() < 1e-6);
        assert_eq!(Activation::Relu.apply(-3.0), 0.0);
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3], vec![0., 0., 0.]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 2.0_f64.ln()]));
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let out = tape.value(y).data();
        assert!(out[0] > 1.0 - 1e-12 && out[1] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, vec![7, 5]));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn batch_norm_constant_batch_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 2, vec![3.0; 8]));
        let gamma = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 1.0]));
        let beta = tape.constant(Tensor::from_vec(vec![2], vec![0.7, 0.7]));
        let mut st = BnState::new(2);
        let y = tape
            .batch_norm(x, gamma, beta, &mut st, Mode::Train)
            .unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_two_row_column() {
        // column [1,3]: mean 2, biased var 1 -> ±1/sqrt(1+1e-5)
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![1], vec![1.0]));
        let beta = tape.constant(Tensor::from_vec(vec![1], vec![0.0]));
        let mut st = BnState::new(1);
        let y = tape
            .batch_norm(x, gamma, beta, &mut st, Mode::Train)
            .unwrap();
        assert!((tape.value(y).data()[0] - -0.999995).abs() < 1e-6);
        assert!((tape.value(y).data()[1] - 0.999995).abs() < 1e-6);

        let gamma = tape.constant(Tensor::from_vec(vec![1], vec![2.0]));
        let beta = tape.constant(Tensor::from_vec(vec![1], vec![1.0]));
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]));
        let y = tape
            .batch_norm(x, gamma, beta, &mut st, Mode::Train)
            .unwrap();
        assert!((tape.value(y).data()[0] - -0.99999).abs() < 1e-5);
        assert!((tape.value(y).data()[1] - 2.99999).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![2], vec![1.0, 1.0]));
        let beta = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 0.0]));
        let mut st = BnState::new(2);
        assert!(matches!(
            tape.batch_norm(x, gamma, beta, &mut st, Mode::Train),
            Err(TensorError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn batch_norm_train_stats_are_normalized() {
        // Column variance must dominate eps=1e-5 for the 1e-6 tolerance on
        // the unit variance of the pre-affine output.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 32;
        let data: Vec<f64> = (0..b * 3).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(b, 3, data));
        let gamma = tape.constant(Tensor::from_vec(vec![3], vec![1.0; 3]));
        let beta = tape.constant(Tensor::from_vec(vec![3], vec![0.0; 3]));
        let mut st = BnState::new(3);
        let y = tape
            .batch_norm(x, gamma, beta, &mut st, Mode::Train)
            .unwrap();
        let out = tape.value(y).data();
        for j in 0..3 {
            let col: Vec<f64> = (0..b).map(|r| out[r * 3 + j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / b as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
            assert!(mean.abs() < 1e-10, "column mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "column var {var}");
        }

        // With a non-unit scale the post-affine variance is γ².
        let data: Vec<f64> = (0..b).map(|_| rng.gen_range(-40.0..40.0)).collect();
        let x = tape.constant(Tensor::matrix(b, 1, data));
        let gamma = tape.constant(Tensor::from_vec(vec![1], vec![2.0]));
        let beta = tape.constant(Tensor::from_vec(vec![1], vec![0.3]));
        let mut st = BnState::new(1);
        let y = tape
            .batch_norm(x, gamma, beta, &mut st, Mode::Train)
            .unwrap();
        let col = tape.value(y).data();
        let mean: f64 = col.iter().sum::<f64>() / b as f64;
        let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
        assert!((mean - 0.3).abs() < 1e-10);
        assert!((var - 4.0).abs() < 4.0 * 1e-6, "column var {var}");
    }

    #[test]
    fn batch_norm_running_stats_update_and_infer_mode() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 1, vec![1.0, 3.0]));
        let gamma = tape.constant(Tensor::from_vec(vec![1], vec![1.0]));
        let beta = tape.constant(Tensor::from_vec(vec![1], vec![0.0]));
        let mut st = BnState::new(1);
        tape.batch_norm(x, gamma, beta, &mut st, Mode::Train)
            .unwrap();
        // new = 0.99·old + 0.01·batch
        assert!((st.running_mean[0] - 0.02).abs() < 1e-12);
        assert!((st.running_var[0] - (0.99 + 0.01)).abs() < 1e-12);

        // Frozen mode leaves state untouched.
        let before = st.clone();
        let x = tape.constant(Tensor::matrix(2, 1, vec![5.0, 9.0]));
        tape.batch_norm(x, gamma, beta, &mut st, Mode::Frozen)
            .unwrap();
        assert_eq!(st, before);

        // Infer mode uses the running statistics.
        let x = tape.constant(Tensor::matrix(1, 1, vec![st.running_mean[0]]));
        let y = tape
            .batch_norm(x, gamma, beta, &mut st, Mode::Infer)
            .unwrap();
        assert!(tape.value(y).data()[0].abs() < 1e-12);
    }

    #[test]
    fn concat_hand_example_and_backward_shapes() {
        let mut tape = Tape::new();
        let a0 = Tensor::matrix(1, 2, vec![1., 2.]).with_grad();
        let b0 = Tensor::matrix(1, 1, vec![3.]).with_grad();
        let a = tape.param(&a0);
        let b = tape.param(&b0);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);

        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1., 1.]);
        assert_eq!(tape.grad(b).unwrap(), &[1.]);
    }

    #[test]
    fn concat_width_adds_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let a = tape.constant(rand_tensor(&mut rng, vec![2, 8]));
        let b = tape.constant(rand_tensor(&mut rng, vec![2, 8]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 16]);

        let odd = tape.constant(rand_tensor(&mut rng, vec![3, 8]));
        assert!(matches!(
            tape.concat(&[a, odd], 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn weighted_sum_rejects_arity_mismatch() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let e = tape.constant(Tensor::matrix(2, 4, vec![0.0; 8]));
        assert!(matches!(
            tape.weighted_sum(w, &[e, e]),
            Err(TensorError::ArityMismatch {
                expected: 3,
                got: 2,
                ..
            })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![3], vec![5., -1., 2.]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![2], vec![1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_untouched_param_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![2], vec![1., 2.]));
        let unused = tape.param(&Tensor::from_vec(vec![2], vec![3., 4.]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![2], vec![1., 2.]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn finite_diff_quadratic() {
        let theta = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &theta, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 42.0, &theta, 1e-5);
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn weighted_sum_values() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(1, 2, vec![0.25, 0.75]));
        let e1 = tape.constant(Tensor::matrix(1, 3, vec![1.0; 3]));
        let e2 = tape.constant(Tensor::matrix(1, 3, vec![3.0; 3]));
        let out = tape.weighted_sum(w, &[e1, e2]).unwrap();
        for v in tape.value(out).data() {
            assert!((v - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_hand_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(vec![1], vec![0.9]));
        let l = tape.bce_mean(p, &[1.0], 1e-7).unwrap();
        assert!((tape.value(l).item() - 0.105361).abs() < 1e-6);

        let p = tape.constant(Tensor::from_vec(vec![2], vec![0.5, 0.5]));
        let l = tape.bce_mean(p, &[1.0, 0.0], 1e-7).unwrap();
        assert!((tape.value(l).item() - 2.0_f64.ln()).abs() < 1e-12);

        let p = tape.constant(Tensor::from_vec(vec![1], vec![0.9]));
        assert!(matches!(
            tape.bce_mean(p, &[2.0], 1e-7),
            Err(TensorError::InvalidLabel(_))
        ));
    }

    /// Spec-level invariant: every differentiable op agrees with central
    /// finite differences at 20 random points, relative error < 1e-4.
    #[test]
    fn all_ops_match_finite_differences_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        type BuildFn = fn(&mut Tape, Var, Var) -> Var;
        let builders: Vec<(&str, BuildFn, Vec<usize>, Vec<usize>)> = vec![
            (
                "matmul",
                |t, a, b| {
                    let c = t.matmul(a, b).unwrap();
                    t.sum_all(c)
                },
                vec![3, 4],
                vec![4, 2],
            ),
            (
                "add",
                |t, a, b| {
                    let c = t.add(a, b).unwrap();
                    t.sum_all(c)
                },
                vec![2, 3],
                vec![2, 3],
            ),
            (
                "add_bias",
                |t, a, b| {
                    let c = t.add_bias(a, b).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.sum_all(sq)
                },
                vec![3, 2],
                vec![2],
            ),
            (
                "mul",
                |t, a, b| {
                    let c = t.mul(a, b).unwrap();
                    t.sum_all(c)
                },
                vec![2, 3],
                vec![2, 3],
            ),
            (
                "relu",
                |t, a, b| {
                    let c = t.activate(Activation::Relu, a);
                    let d = t.mul(c, b).unwrap();
                    t.sum_all(d)
                },
                vec![2, 3],
                vec![2, 3],
            ),
            (
                "sigmoid",
                |t, a, b| {
                    let c = t.activate(Activation::Sigmoid, a);
                    let d = t.mul(c, b).unwrap();
                    t.sum_all(d)
                },
                vec![2, 3],
                vec![2, 3],
            ),
            (
                "swish",
                |t, a, b| {
                    let c = t.activate(Activation::Swish, a);
                    let d = t.mul(c, b).unwrap();
                    t.sum_all(d)
                },
                vec![2, 3],
                vec![2, 3],
            ),
            (
                "softmax",
                |t, a, b| {
                    let c = t.softmax(a).unwrap();
                    let d = t.mul(c, b).unwrap();
                    t.sum_all(d)
                },
                vec![4, 3],
                vec![4, 3],
            ),
            (
                "scale",
                |t, a, _| {
                    let c = t.scale(a, -1.7);
                    t.sum_all(c)
                },
                vec![2, 3],
                vec![2, 3],
            ),
            (
                "concat",
                |t, a, b| {
                    let c = t.concat(&[a, b], 1).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.sum_all(sq)
                },
                vec![3, 2],
                vec![3, 4],
            ),
            (
                "weighted_sum",
                |t, a, b| {
                    let sm = t.softmax(a).unwrap();
                    let e2 = t.scale(b, 0.5);
                    let c = t.weighted_sum(sm, &[b, e2]).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.sum_all(sq)
                },
                vec![3, 2],
                vec![3, 4],
            ),
        ];

        for (name, build, sa, sb) in &builders {
            for trial in 0..20 {
                let a0 = rand_tensor(&mut rng, sa.clone());
                let b0 = rand_tensor(&mut rng, sb.clone());
                let mut tape = Tape::new();
                let a = tape.param(&a0);
                let b = tape.param(&b0);
                let loss = build(&mut tape, a, b);
                tape.backward(loss).unwrap();

                for (which, t0, other) in [(0, &a0, &b0), (1, &b0, &a0)] {
                    let fd = finite_diff_grad(
                        |t| {
                            let mut tp = Tape::new();
                            let (av, bv) = if which == 0 {
                                (tp.constant(t.clone()), tp.constant(other.clone()))
                            } else {
                                (tp.constant(other.clone()), tp.constant(t.clone()))
                            };
                            let l = build(&mut tp, av, bv);
                            tp.value(l).item()
                        },
                        t0,
                        1e-5,
                    );
                    // An input the builder never touches has no gradient;
                    // finite differences must then be identically zero.
                    let var = if which == 0 { a } else { b };
                    match tape.grad(var) {
                        Some(got) => {
                            for (g, f) in got.iter().zip(fd.data()) {
                                assert!(
                                    rel_err(*g, *f) < 1e-4,
                                    "{name} trial {trial}: autodiff {g} vs fd {f}"
                                );
                            }
                        }
                        None => {
                            assert!(fd.data().iter().all(|f| f.abs() < 1e-9), "{name}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for mode in [Mode::Frozen, Mode::Infer] {
            for _ in 0..20 {
                let x0 = rand_tensor(&mut rng, vec![5, 3]);
                let g0 = rand_tensor(&mut rng, vec![3]);
                let b0 = rand_tensor(&mut rng, vec![3]);
                let mut st = BnState::new(3);
                st.running_mean = vec![0.3, -0.2, 0.1];
                st.running_var = vec![1.4, 0.6, 2.0];

                let run = |x: &Tensor, g: &Tensor, bta: &Tensor, st: &BnState| {
                    let mut tp = Tape::new();
                    let xv = tp.constant(x.clone());
                    let gv = tp.constant(g.clone());
                    let bv = tp.constant(bta.clone());
                    let mut s = st.clone();
                    let y = tp.batch_norm(xv, gv, bv, &mut s, mode).unwrap();
                    let sq = tp.mul(y, y).unwrap();
                    let l = tp.sum_all(sq);
                    tp.value(l).item()
                };

                let mut tape = Tape::new();
                let xv = tape.param(&x0);
                let gv = tape.param(&g0);
                let bv = tape.param(&b0);
                let mut s = st.clone();
                let y = tape.batch_norm(xv, gv, bv, &mut s, mode).unwrap();
                let sq = tape.mul(y, y).unwrap();
                let l = tape.sum_all(sq);
                tape.backward(l).unwrap();

                for (var, t0, f) in [
                    (
                        xv,
                        &x0,
                        Box::new(|t: &Tensor| run(t, &g0, &b0, &st)) as Box<dyn Fn(&Tensor) -> f64>,
                    ),
                    (gv, &g0, Box::new(|t: &Tensor| run(&x0, t, &b0, &st))),
                    (bv, &b0, Box::new(|t: &Tensor| run(&x0, &g0, t, &st))),
                ] {
                    let fd = finite_diff_grad(|t| f(t), t0, 1e-5);
                    for (g, fdv) in tape.grad(var).unwrap().iter().zip(fd.data()) {
                        assert!(rel_err(*g, *fdv) < 1e-4, "mode {mode:?}: {g} vs {fdv}");
                    }
                }
            }
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..20 {
            let p0 = Tensor::from_vec(vec![6], (0..6).map(|_| rng.gen_range(0.05..0.95)).collect());
            let labels: Vec<f64> = (0..6).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let mut tape = Tape::new();
            let p = tape.param(&p0);
            let l = tape.bce_mean(p, &labels, 1e-7).unwrap();
            tape.backward(l).unwrap();
            let fd = finite_diff_grad(
                |t| {
                    let mut tp = Tape::new();
                    let pv = tp.constant(t.clone());
                    let l = tp.bce_mean(pv, &labels, 1e-7).unwrap();
                    tp.value(l).item()
                },
                &p0,
                1e-6,
            );
            for (g, f) in tape.grad(p).unwrap().iter().zip(fd.data()) {
                assert!(rel_err(*g, *f) < 1e-4, "{g} vs {f}");
            }
        }
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        // y = x·x + x  =>  dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(vec![2], vec![3.0, -1.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, vec![4, 3]);
        let w1 = rand_tensor(&mut rng, vec![3, 5]);
        let b1 = rand_tensor(&mut rng, vec![5]);
        let w2 = rand_tensor(&mut rng, vec![5, 2]);
        let b2 = rand_tensor(&mut rng, vec![2]);

        let forward = |w1t: &Tensor, tape: &mut Tape| -> Var {
            let x = tape.constant(x0.clone());
            let w1v = tape.param(w1t);
            let b1v = tape.constant(b1.clone());
            let w2v = tape.constant(w2.clone());
            let b2v = tape.constant(b2.clone());
            let h = tape.matmul(x, w1v).unwrap();
            let h = tape.add_bias(h, b1v).unwrap();
            let h = tape.activate(Activation::Swish, h);
            let o = tape.matmul(h, w2v).unwrap();
            let o = tape.add_bias(o, b2v).unwrap();
            let o = tape.activate(Activation::Sigmoid, o);
            tape.sum_all(o)
        };

        let mut tape = Tape::new();
        let loss = forward(&w1, &mut tape);
        let w1_var = Var(1); // first param recorded after x
        tape.backward(loss).unwrap();

        let fd = finite_diff_grad(
            |t| {
                let mut tp = Tape::new();
                let l = forward(t, &mut tp);
                tp.value(l).item()
            },
            &w1,
            1e-5,
        );
        for (g, f) in tape.grad(w1_var).unwrap().iter().zip(fd.data()) {
            assert!(rel_err(*g, *f) < 1e-4, "{g} vs {f}");
        }
    }
}
