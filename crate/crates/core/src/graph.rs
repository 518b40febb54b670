//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`ComputeGraph`], so node indices
//! are already a topological order. [`ComputeGraph::backward`] walks the
//! nodes once, from the loss down to the first leaf.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    NormalizeRows(NodeId),
    /// `out[i, :] = a[i, :] * g[i, 0]`
    ScaleRows(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    /// `out = base; out[rows[i], :] += src[i, :]`
    ScatterAddRows { base: NodeId, src: NodeId, rows: Vec<usize> },
    /// `out[i, 0] = a[idx[i]]`
    GatherElements(NodeId, Vec<(usize, usize)>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorded operations and their values. One graph per forward pass.
#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    corrupt_backward: bool,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negative control for gradient checking: scales the right-operand
    /// gradient of every matmul by 1.5 so that gradcheck must fail.
    pub fn with_corrupted_backward(mut self, corrupt: bool) -> Self {
        self.corrupt_backward = corrupt;
        self
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

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.needs(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        let rg = self.needs(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        let rg = self.needs(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Sum of all elements as a `1×1` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(a).reshaped(rows, cols)?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Divides every row by its sum.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut data = x.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let v = Tensor::matrix(r, c, data).expect("shape preserved");
        let rg = self.needs(&[a]);
        self.push(v, Op::NormalizeRows(a), rg)
    }

    /// Multiplies row `i` of `a` by the scalar `g[i, 0]`.
    pub fn scale_rows(&mut self, a: NodeId, g: NodeId) -> Result<NodeId> {
        let (x, gv) = (self.value(a), self.value(g));
        let (r, c) = x.dims2();
        if gv.dims2() != (r, 1) {
            return Err(Error::Shape {
                op: "scale_rows",
                left: x.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for i in 0..r {
            let s = gv.data()[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let v = Tensor::matrix(r, c, data)?;
        let rg = self.needs(&[a, g]);
        Ok(self.push(v, Op::ScaleRows(a, g), rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).gather_rows(&rows)?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::GatherRows(a, rows), rg))
    }

    pub fn scatter_add_rows(&mut self, base: NodeId, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (b, s) = (self.value(base), self.value(src));
        let (br, bc) = b.dims2();
        let (sr, sc) = s.dims2();
        if bc != sc || sr != rows.len() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                left: b.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let mut data = b.data().to_vec();
        for (i, &dst) in rows.iter().enumerate() {
            if dst >= br {
                return Err(Error::Tensor(format!("row {dst} out of range for {br} rows")));
            }
            for (o, &x) in data[dst * bc..(dst + 1) * bc].iter_mut().zip(s.row(i)) {
                *o += x;
            }
        }
        let v = Tensor::matrix(br, bc, data)?;
        let rg = self.needs(&[base, src]);
        Ok(self.push(v, Op::ScatterAddRows { base, src, rows }, rg))
    }

    /// Picks single elements into an `n×1` column.
    pub fn gather_elements(&mut self, a: NodeId, idx: Vec<(usize, usize)>) -> Result<NodeId> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in &idx {
            if i >= r || j >= c {
                return Err(Error::Tensor(format!("element ({i},{j}) out of range for {r}x{c}")));
            }
            data.push(x.at(i, j));
        }
        let v = Tensor::matrix(idx.len(), 1, data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(v, Op::GatherElements(a, idx), rg))
    }

    /// Reverse pass from a single-element `loss`. Gradients of earlier
    /// passes are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_backward(&node.op, &node.value, &g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaves and intermediates both keep their gradient for inspection.
            grads[idx] = Some(g);
        }

        for node in &mut self.nodes {
            node.grad = None;
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let shape = self.nodes[idx].value.shape().to_vec();
                self.nodes[idx].grad = Some(Tensor::new(shape, g)?);
            }
        }
        Ok(())
    }

    fn local_backward(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                let gt = Tensor::matrix(m, n, g.to_vec()).expect("grad shape");
                let da = gt.matmul(&val(*b).transpose()).expect("shape").into_data();
                let mut db = val(*a).transpose().matmul(&gt).expect("shape").into_data();
                debug_assert_eq!(da.len(), m * k);
                if self.corrupt_backward {
                    db.iter_mut().for_each(|v| *v *= 1.5);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − Σ_j g_j y_j) per row
                let (r, c) = out.dims2();
                let y = out.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let span = i * c..(i + 1) * c;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                    for j in span {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::NormalizeRows(a) => {
                // y = x / s, s = Σx: dx_j = (g_j − Σ_k g_k y_k) / s
                let x = val(*a);
                let (r, c) = x.dims2();
                let y = out.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let span = i * c..(i + 1) * c;
                    let s: f64 = x.data()[span.clone()].iter().sum();
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                    for j in span {
                        d[j] = (g[j] - dot) / s;
                    }
                }
                vec![(*a, d)]
            }
            Op::ScaleRows(a, s) => {
                let x = val(*a);
                let sv = val(*s).data();
                let (r, c) = x.dims2();
                let mut da = vec![0.0; r * c];
                let mut ds = vec![0.0; r];
                for i in 0..r {
                    for j in i * c..(i + 1) * c {
                        da[j] = g[j] * sv[i];
                        ds[i] += g[j] * x.data()[j];
                    }
                }
                vec![(*a, da), (*s, ds)]
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = val(*a).dims2();
                let mut d = vec![0.0; r * c];
                for (i, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[i * c + j];
                    }
                }
                vec![(*a, d)]
            }
            Op::ScatterAddRows { base, src, rows } => {
                let c = val(*base).cols();
                let mut ds = Vec::with_capacity(rows.len() * c);
                for &dst in rows {
                    ds.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                vec![(*base, g.to_vec()), (*src, ds)]
            }
            Op::GatherElements(a, idx) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (k, &(i, j)) in idx.iter().enumerate() {
                    d[i * c + j] += g[k];
                }
                vec![(*a, d)]
            }
        }
    }
}

/// Central-difference gradient of `loss_fn` at `x`.
pub fn finite_diff_grad<F>(loss_fn: F, x: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = loss_fn(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Largest elementwise relative error between an analytic and a numeric
/// gradient. The denominator is floored at `1e-6` so that entries that are
/// both essentially zero do not dominate.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
