//! Reverse-mode autodiff on a linear tape.
//!
//! Operations append nodes in creation order, which is a valid evaluation
//! order by construction; `backward` walks the tape in reverse accumulating
//! vector-Jacobian products. Gradients are returned in a [`GradMap`] keyed by
//! node id rather than stored in the nodes, so several backward passes (with
//! different seeds) can run against one recorded forward pass — the exact
//! divergence and Hutchinson probes rely on that.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// [m,k] x [k,n]
    MatMul(NodeId, NodeId),
    /// matrix + row-broadcast bias
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    /// columns of lhs then rhs
    ConcatCols(NodeId, NodeId),
    SumAll(NodeId),
    /// Mean over rows of -sum(target * log_softmax(logits)); targets are
    /// constant probability rows (one-hot or label-smoothed).
    CrossEntropy { logits: NodeId, targets: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators from one backward pass.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of `shape` when the node is unreachable
    /// from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul output")
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        self.push(Op::AddBias(a, bias), value, "add_bias output")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), value, "add output")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), value, "sub output")
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push(Op::Hadamard(a, b), value, "hadamard output")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value, "scale output")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).tanh();
        self.push(Op::Tanh(a), value, "tanh output")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).concat_cols(self.value(b))?;
        self.push(Op::ConcatCols(a, b), value, "concat_cols output")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value, "sum output")
    }

    /// Mean negative log-likelihood of `targets` (probability rows) under
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        let (m, n) = lv.dims2()?;
        let (tm, tn) = targets.dims2()?;
        if (m, n) != (tm, tn) {
            return Err(Error::Dim(format!(
                "cross_entropy: logits [{m},{n}] vs targets [{tm},{tn}]"
            )));
        }
        let mut total = 0.0;
        for i in 0..m {
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            for j in 0..n {
                total -= targets.row(i)[j] * (row[j] - lse);
            }
        }
        let value = Tensor::scalar(total / m as f64);
        self.push(Op::CrossEntropy { logits, targets }, value, "cross_entropy output")
    }

    /// Gradients of a scalar loss for every node that feeds it.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let seed = Tensor::scalar(1.0);
        self.backward_seeded(loss, &seed)
    }

    /// Vector-Jacobian product: gradients of `seed . output` w.r.t. every
    /// node. `seed` must match the output's element count.
    pub fn backward_seeded(&self, out: NodeId, seed: &Tensor) -> Result<GradMap> {
        if seed.numel() != self.value(out).numel() {
            return Err(Error::Dim(format!(
                "seed shape {:?} vs output shape {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::new(
            self.value(out).shape().to_vec(),
            seed.data().to_vec(),
        )?);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddBias(a, bias) => {
                    let gb = g.col_sums()?;
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *bias, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.scale(*c))?;
                }
                Op::Tanh(a) => {
                    // d tanh = 1 - tanh^2, using the stored output value
                    let out_v = &self.nodes[idx].value;
                    let mut ga = g.clone();
                    for (gi, &y) in ga.data_mut().iter_mut().zip(out_v.data()) {
                        *gi *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(a, b) => {
                    let (m, p) = self.value(*a).dims2()?;
                    let (_, q) = self.value(*b).dims2()?;
                    let mut ga = Vec::with_capacity(m * p);
                    let mut gb = Vec::with_capacity(m * q);
                    for i in 0..m {
                        let row = &g.data()[i * (p + q)..(i + 1) * (p + q)];
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![m, p], ga)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![m, q], gb)?)?;
                }
                Op::SumAll(a) => {
                    let gv = g.item()?;
                    let shape = self.value(*a).shape().to_vec();
                    let numel = self.value(*a).numel();
                    accumulate(&mut grads, *a, Tensor::new(shape, vec![gv; numel])?)?;
                }
                Op::CrossEntropy { logits, targets } => {
                    let gv = g.item()?;
                    let lv = self.value(*logits);
                    let (m, n) = lv.dims2()?;
                    let mut gl = Vec::with_capacity(m * n);
                    for i in 0..m {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for j in 0..n {
                            let p = libm::exp(row[j] - lse);
                            gl.push((p - targets.row(i)[j]) * gv / m as f64);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![m, n], gl)?)?;
                }
            }
        }
        Ok(GradMap { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, incoming: Tensor) -> Result<()> {
    incoming.check_finite("gradient accumulation")?;
    grads[id.0] = Some(match grads[id.0].take() {
        Some(existing) => existing.add(&incoming)?,
        None => incoming,
    });
    Ok(())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let s: f64 = row.iter().map(|&x| libm::exp(x - m)).sum();
    m + libm::log(s)
}

/// Row-wise softmax of a [m,n] logits matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (m, n) = logits.dims2()?;
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        for &x in row {
            data.push(libm::exp(x - lse));
        }
    }
    Tensor::new(vec![m, n], data)
}
