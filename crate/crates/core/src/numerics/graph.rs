//! Record-and-replay reverse-mode differentiation.
//!
//! A [`Graph`] evaluates each primitive eagerly and records it. Nodes can only
//! reference earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{CcraError, Result};

use super::ops::{self, LayerNormStats};
use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: LayerNormStats,
    },
    MeanRows(NodeId),
    Conv1dReflect {
        v: NodeId,
        kernel: Tensor,
    },
    ScaleRows(NodeId, NodeId),
    AddRowVector(NodeId, NodeId),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation over [`Tensor`] values.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; nodes the output does not depend on get zeros.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::from_op("gradient", shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_connected(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = ops::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = ops::add_scalar(self.value(a), c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (v, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::avg_pool_rows(self.value(a))?;
        Ok(self.push(v, Op::MeanRows(a)))
    }

    /// Convolution with a fixed (non-learned) kernel.
    pub fn conv1d_reflect(&mut self, v: NodeId, kernel: &Tensor) -> Result<NodeId> {
        let out = ops::conv1d_reflect(self.value(v), kernel)?;
        Ok(self.push(
            out,
            Op::Conv1dReflect {
                v,
                kernel: kernel.clone(),
            },
        ))
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let v = ops::scale_rows(self.value(x), self.value(s))?;
        Ok(self.push(v, Op::ScaleRows(x, s)))
    }

    pub fn add_row_vector(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add_row_vector(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::AddRowVector(x, b)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_rows(&values)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = ops::slice_rows(self.value(x), start, len)?;
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let loss = ops::cross_entropy(self.value(logits), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(CcraError::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, g: Vec<f64>| match &mut grads[id.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        };
        let dy_tensor = || Tensor::from_op("grad", node.value.shape().to_vec(), dy.to_vec());

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let dc = dy_tensor();
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = ops::matmul(&dc, &ops::transpose(bv)?)?;
                let db = ops::matmul(&ops::transpose(av)?, &dc)?;
                acc(*a, da.into_data());
                acc(*b, db.into_data());
            }
            Op::Transpose(a) => {
                acc(*a, ops::transpose(&dy_tensor())?.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, dy.iter().zip(bv).map(|(g, x)| g * x).collect());
                acc(*b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(*a, dy.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) => acc(*a, dy.to_vec()),
            Op::Softmax(a) => {
                let (rows, d) = node.value.as_matrix_dims();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                    let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                    dx.extend(yr.iter().zip(gr).map(|(p, g)| p * (g - dot)));
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (rows, d) = node.value.as_matrix_dims();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xh = &stats.normalized[r * d..(r + 1) * d];
                    let g = &dy[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += g[j] * xh[j];
                        dbeta[j] += g[j];
                        let dxh = g[j] * gv[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let rstd = stats.inv_std[r];
                    for j in 0..d {
                        let dxh = g[j] * gv[j];
                        dx[r * d + j] = rstd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).as_matrix_dims();
                let inv = 1.0 / n as f64;
                let mut g = Vec::with_capacity(n * d);
                for _ in 0..n {
                    g.extend(dy.iter().map(|v| v * inv));
                }
                acc(*a, g);
            }
            Op::Conv1dReflect { v, kernel } => {
                let n = dy.len();
                let k = kernel.len();
                let r = (k / 2) as isize;
                let mut dv = vec![0.0; n];
                for (i, &g) in dy.iter().enumerate() {
                    for (j, &w) in kernel.data().iter().enumerate() {
                        dv[ops::reflect_index(i as isize + j as isize - r, n)] += w * g;
                    }
                }
                acc(*v, dv);
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let (n, d) = xv.as_matrix_dims();
                let mut dx = vec![0.0; n * d];
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = dy[i * d + j] * sv[i];
                        ds[i] += dy[i * d + j] * xv.data()[i * d + j];
                    }
                }
                acc(*x, dx);
                acc(*s, ds);
            }
            Op::AddRowVector(x, b) => {
                let d = self.value(*b).len();
                let mut db = vec![0.0; d];
                for (idx, g) in dy.iter().enumerate() {
                    db[idx % d] += g;
                }
                acc(*x, dy.to_vec());
                acc(*b, db);
            }
            Op::Reshape(a) => acc(*a, dy.to_vec()),
            Op::ConcatCols(a, b) => {
                let (n, da) = self.value(*a).as_matrix_dims();
                let db = self.value(*b).as_matrix_dims().1;
                let w = da + db;
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * db);
                for i in 0..n {
                    ga.extend_from_slice(&dy[i * w..i * w + da]);
                    gb.extend_from_slice(&dy[i * w + da..(i + 1) * w]);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, dy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let d = xv.as_matrix_dims().1;
                let mut dx = vec![0.0; xv.len()];
                dx[start * d..start * d + dy.len()].copy_from_slice(dy);
                acc(*x, dx);
            }
            Op::CrossEntropy { logits, target } => {
                let mut p = ops::softmax(self.value(*logits))?.into_data();
                p[*target] -= 1.0;
                acc(*logits, p.into_iter().map(|v| v * dy[0]).collect());
            }
            Op::Sum(a) => acc(*a, vec![dy[0]; self.value(*a).len()]),
        }
        Ok(())
    }
}
