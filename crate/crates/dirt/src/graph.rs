//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of [`Node`]s. Values are computed
//! eagerly as nodes are inserted, so node ids are already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Tensors are
//! shared via `Arc`, so inserting a large parameter as a leaf copies
//! nothing.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp distance from 0 and 1 applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Primitive differentiable operations.
#[derive(Debug, Clone)]
pub enum Op {
    /// Parameter or constant input.
    Leaf,
    /// Elementwise sum of two same-shape tensors.
    Add(NodeId, NodeId),
    /// Elementwise difference.
    Sub(NodeId, NodeId),
    /// Elementwise (Hadamard) product.
    Mul(NodeId, NodeId),
    /// Scalar node times tensor node.
    MulScalar { s: NodeId, x: NodeId },
    /// `[r, c]` matrix times `[c]` vector.
    MatVec { m: NodeId, v: NodeId },
    /// `[m, k]` times `[k, n]`.
    MatMul { a: NodeId, b: NodeId },
    /// Row vector `[r]` times `[r, c]` matrix; the weighted row sum.
    VecMat { v: NodeId, m: NodeId },
    /// Inner product of two same-length vectors.
    Dot(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Elementwise natural log.
    Log(NodeId),
    /// Softmax over a 1-D tensor, computed with max subtraction.
    Softmax(NodeId),
    /// Sum of all elements.
    Sum(NodeId),
    /// Mean of all elements.
    Mean(NodeId),
    /// Concatenation of 1-D tensors.
    Concat(Vec<NodeId>),
    /// Stack `v` equal-length vectors into a `[v, d]` matrix.
    StackRows(Vec<NodeId>),
    /// Select one row of a matrix.
    SelectRow { m: NodeId, row: usize },
    /// Gather elements of a vector at fixed indices.
    Gather { v: NodeId, idx: Vec<usize> },
    /// Multiply by a compile-time constant.
    Scale { x: NodeId, c: f64 },
    /// Add a compile-time constant.
    Shift { x: NodeId, c: f64 },
    /// Inverted dropout; mask entries are either 0 or 1/keep.
    Dropout { x: NodeId, mask: Arc<Vec<f64>> },
    /// Bernoulli negative log-likelihood of a probability node, with the
    /// probability clamped into [PROB_EPS, 1 - PROB_EPS] before the log.
    Bce { p: NodeId, label: f64 },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Arc<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph {
            nodes: Vec::with_capacity(n),
        }
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: format!("{:?}", op_name(&op)),
            });
        }
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Insert a shared tensor as a leaf. The tensor data is not copied.
    pub fn leaf(&mut self, value: Arc<Tensor>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: "leaf".to_string(),
            });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(Arc::new(value))
    }

    pub fn scalar(&mut self, x: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(x))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Add(a, b), Tensor::new(shape, out)?)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sub(a, b), Tensor::new(shape, out)?)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::new(shape, out)?)
    }

    /// Scalar node times tensor node.
    pub fn mul_scalar(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.value(s).shape().to_vec(),
                rhs: self.value(x).shape().to_vec(),
            });
        }
        let k = self.value(s).item();
        let out: Vec<f64> = self.value(x).data().iter().map(|v| k * v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::MulScalar { s, x }, Tensor::new(shape, out)?)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mt, vt) = (self.value(m), self.value(v));
        if !mt.is_matrix() || !vt.is_vector() || mt.cols() != vt.numel() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: mt.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        let (r, c) = (mt.rows(), mt.cols());
        let (md, vd) = (mt.data(), vt.data());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &md[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                acc += row[j] * vd[j];
            }
            out[i] = acc;
        }
        self.push(Op::MatVec { m, v }, Tensor::vector(out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.is_matrix() || !bt.is_matrix() || at.cols() != bt.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: at.shape().to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let (ad, bd) = (at.data(), bt.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?)
    }

    pub fn vecmat(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let (vt, mt) = (self.value(v), self.value(m));
        if !vt.is_vector() || !mt.is_matrix() || vt.numel() != mt.rows() {
            return Err(Error::ShapeMismatch {
                op: "vecmat",
                lhs: vt.shape().to_vec(),
                rhs: mt.shape().to_vec(),
            });
        }
        let (r, c) = (mt.rows(), mt.cols());
        let (vd, md) = (vt.data(), mt.data());
        let mut out = vec![0.0; c];
        for i in 0..r {
            let vi = vd[i];
            let row = &md[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] += vi * row[j];
            }
        }
        self.push(Op::VecMat { v, m }, Tensor::vector(out))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), Tensor::scalar(s))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh(x), Tensor::new(shape, out)?)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| sigmoid_scalar(v))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid(x), Tensor::new(shape, out)?)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Log(x), Tensor::new(shape, out)?)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if !self.value(x).is_vector() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: self.value(x).shape().to_vec(),
                rhs: vec![],
            });
        }
        let xs = self.value(x).data();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        self.push(Op::Softmax(x), Tensor::vector(out))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Mean(x), Tensor::scalar(s / n))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidInput("concat of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            if !self.value(x).is_vector() && !self.value(x).is_scalar() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: vec![],
                });
            }
            out.extend_from_slice(self.value(x).data());
        }
        self.push(Op::Concat(xs.to_vec()), Tensor::vector(out))
    }

    pub fn stack_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::InvalidInput("stack of zero rows".into()));
        }
        let d = self.value(xs[0]).numel();
        let mut out = Vec::with_capacity(xs.len() * d);
        for &x in xs {
            if self.value(x).numel() != d || !self.value(x).is_vector() {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: self.value(x).shape().to_vec(),
                });
            }
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            Op::StackRows(xs.to_vec()),
            Tensor::new(vec![xs.len(), d], out)?,
        )
    }

    pub fn select_row(&mut self, m: NodeId, row: usize) -> Result<NodeId> {
        let mt = self.value(m);
        if !mt.is_matrix() || row >= mt.rows() {
            return Err(Error::InvalidInput(format!(
                "select_row: row {row} out of range for shape {:?}",
                mt.shape()
            )));
        }
        let c = mt.cols();
        let out = mt.data()[row * c..(row + 1) * c].to_vec();
        self.push(Op::SelectRow { m, row }, Tensor::vector(out))
    }

    pub fn gather(&mut self, v: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vt = self.value(v);
        if !vt.is_vector() || idx.iter().any(|&i| i >= vt.numel()) {
            return Err(Error::InvalidInput(format!(
                "gather: index out of range for shape {:?}",
                vt.shape()
            )));
        }
        let out: Vec<f64> = idx.iter().map(|&i| vt.data()[i]).collect();
        self.push(
            Op::Gather {
                v,
                idx: idx.to_vec(),
            },
            Tensor::vector(out),
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Scale { x, c }, Tensor::new(shape, out)?)
    }

    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| c + v).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Shift { x, c }, Tensor::new(shape, out)?)
    }

    /// Inverted dropout: each element is kept with probability `1 - rate`
    /// and scaled by `1/(1 - rate)`, so inference needs no rescaling.
    /// Sampling happens at insertion time from the caller's RNG.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::Dropout {
                x,
                mask: Arc::new(mask),
            },
            Tensor::new(shape, out)?,
        )
    }

    /// Bernoulli negative log-likelihood `-[r ln p + (1-r) ln(1-p)]` of a
    /// scalar probability node, clamped away from 0/1 by [`PROB_EPS`].
    pub fn bce(&mut self, p: NodeId, label: f64) -> Result<NodeId> {
        if !self.value(p).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: self.value(p).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let pv = self.value(p).item().clamp(PROB_EPS, 1.0 - PROB_EPS);
        let loss = -(label * pv.ln() + (1.0 - label) * (1.0 - pv).ln());
        self.push(Op::Bce { p, label }, Tensor::scalar(loss))
    }

    /// Reverse sweep from a scalar root. Returns one gradient tensor per
    /// node; leaves not reachable from the root keep zero gradients.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>> {
        if !self.value(root).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for id in (0..=root.0).rev() {
            let g = std::mem::replace(&mut grads[id], Tensor::zeros(&[1]));
            self.accumulate(id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(grads)
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Tensor]) {
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (dst, &gi) in grads[a.0].data_mut().iter_mut().zip(gd) {
                    *dst += gi;
                }
                for (dst, &gi) in grads[b.0].data_mut().iter_mut().zip(gd) {
                    *dst += gi;
                }
            }
            Op::Sub(a, b) => {
                for (dst, &gi) in grads[a.0].data_mut().iter_mut().zip(gd) {
                    *dst += gi;
                }
                for (dst, &gi) in grads[b.0].data_mut().iter_mut().zip(gd) {
                    *dst -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for i in 0..gd.len() {
                    grads[a.0].data_mut()[i] += gd[i] * bv[i];
                }
                for i in 0..gd.len() {
                    grads[b.0].data_mut()[i] += gd[i] * av[i];
                }
            }
            Op::MulScalar { s, x } => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                let mut ds = 0.0;
                for i in 0..gd.len() {
                    ds += gd[i] * xv[i];
                }
                grads[s.0].data_mut()[0] += ds;
                for i in 0..gd.len() {
                    grads[x.0].data_mut()[i] += gd[i] * sv;
                }
            }
            Op::MatVec { m, v } => {
                let mt = self.value(*m);
                let (r, c) = (mt.rows(), mt.cols());
                let (md, vd) = (mt.data(), self.value(*v).data());
                {
                    let dm = grads[m.0].data_mut();
                    for i in 0..r {
                        let gi = gd[i];
                        for j in 0..c {
                            dm[i * c + j] += gi * vd[j];
                        }
                    }
                }
                let dv = grads[v.0].data_mut();
                for i in 0..r {
                    let gi = gd[i];
                    let row = &md[i * c..(i + 1) * c];
                    for j in 0..c {
                        dv[j] += gi * row[j];
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                let (ad, bd) = (at.data(), bt.data());
                {
                    // dA = g . B^T
                    let da = grads[a.0].data_mut();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gd[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                // dB = A^T . g
                let db = grads[b.0].data_mut();
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += ad[i * k + p] * gd[i * n + j];
                        }
                        db[p * n + j] += acc;
                    }
                }
            }
            Op::VecMat { v, m } => {
                let mt = self.value(*m);
                let (r, c) = (mt.rows(), mt.cols());
                let (md, vd) = (mt.data(), self.value(*v).data());
                {
                    let dv = grads[v.0].data_mut();
                    for i in 0..r {
                        let row = &md[i * c..(i + 1) * c];
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += gd[j] * row[j];
                        }
                        dv[i] += acc;
                    }
                }
                let dm = grads[m.0].data_mut();
                for i in 0..r {
                    let vi = vd[i];
                    for j in 0..c {
                        dm[i * c + j] += vi * gd[j];
                    }
                }
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for i in 0..av.len() {
                    grads[a.0].data_mut()[i] += g0 * bv[i];
                }
                for i in 0..av.len() {
                    grads[b.0].data_mut()[i] += g0 * av[i];
                }
            }
            Op::Tanh(x) => {
                let yv = self.nodes[id].value.data();
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += gd[i] * (1.0 - yv[i] * yv[i]);
                }
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[id].value.data();
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += gd[i] * yv[i] * (1.0 - yv[i]);
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += gd[i] / xv[i];
                }
            }
            Op::Softmax(x) => {
                let yv = self.nodes[id].value.data();
                let gy: f64 = gd.iter().zip(yv).map(|(g, y)| g * y).sum();
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += yv[i] * (gd[i] - gy);
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                for dst in grads[x.0].data_mut() {
                    *dst += g0;
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let g0 = gd[0] / n;
                for dst in grads[x.0].data_mut() {
                    *dst += g0;
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    let dx = grads[x.0].data_mut();
                    for i in 0..n {
                        dx[i] += gd[off + i];
                    }
                    off += n;
                }
            }
            Op::StackRows(xs) => {
                let d = self.value(xs[0]).numel();
                for (r, &x) in xs.iter().enumerate() {
                    let dx = grads[x.0].data_mut();
                    for i in 0..d {
                        dx[i] += gd[r * d + i];
                    }
                }
            }
            Op::SelectRow { m, row } => {
                let c = self.value(*m).cols();
                let dm = grads[m.0].data_mut();
                for j in 0..c {
                    dm[row * c + j] += gd[j];
                }
            }
            Op::Gather { v, idx } => {
                let dv = grads[v.0].data_mut();
                for (i, &src) in idx.iter().enumerate() {
                    dv[src] += gd[i];
                }
            }
            Op::Scale { x, c } => {
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += gd[i] * c;
                }
            }
            Op::Shift { x, .. } => {
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += gd[i];
                }
            }
            Op::Dropout { x, mask } => {
                let dx = grads[x.0].data_mut();
                for i in 0..gd.len() {
                    dx[i] += gd[i] * mask[i];
                }
            }
            Op::Bce { p, label } => {
                let pv = self.value(*p).item().clamp(PROB_EPS, 1.0 - PROB_EPS);
                grads[p.0].data_mut()[0] += gd[0] * (-label / pv + (1.0 - label) / (1.0 - pv));
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulScalar { .. } => "mul_scalar",
        Op::MatVec { .. } => "matvec",
        Op::MatMul { .. } => "matmul",
        Op::VecMat { .. } => "vecmat",
        Op::Dot(..) => "dot",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Log(..) => "log",
        Op::Softmax(..) => "softmax",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Concat(..) => "concat",
        Op::StackRows(..) => "stack_rows",
        Op::SelectRow { .. } => "select_row",
        Op::Gather { .. } => "gather",
        Op::Scale { .. } => "scale",
        Op::Shift { .. } => "shift",
        Op::Dropout { .. } => "dropout",
        Op::Bce { .. } => "bce",
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compare analytic gradients against central finite differences for a
/// graph built from a flat parameter vector.
///
/// The builder turns parameter values into a scalar-rooted graph and
/// reports the parameter leaves in flattening order. Initial parameter
/// values are sampled uniformly from (-0.5, 0.5) using the seed. Returns
/// the maximum relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<B>(n_params: usize, seed: u64, builder: B) -> Result<f64>
where
    B: Fn(&[f64]) -> Result<(Graph, NodeId, Vec<NodeId>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-0.5..0.5)).collect();
    grad_check_at(&params, builder)
}

/// [`grad_check`] at explicitly supplied parameter values.
pub fn grad_check_at<B>(params: &[f64], builder: B) -> Result<f64>
where
    B: Fn(&[f64]) -> Result<(Graph, NodeId, Vec<NodeId>)>,
{
    let eval = |vals: &[f64]| -> Result<f64> {
        let (g, root, _) = builder(vals)?;
        Ok(g.value(root).item())
    };

    let (graph, root, leaves) = builder(params)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|id| grads[id.0].data().to_vec())
        .collect();
    if analytic.len() != params.len() {
        return Err(Error::InvalidInput(format!(
            "builder returned {} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }

    let mut max_err: f64 = 0.0;
    let mut probe = params.to_vec();
    for k in 0..params.len() {
        let orig = probe[k];
        probe[k] = orig + GRAD_CHECK_STEP;
        let up = eval(&probe)?;
        probe[k] = orig - GRAD_CHECK_STEP;
        let down = eval(&probe)?;
        probe[k] = orig;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                op: format!("grad_check probe at parameter {k}"),
            });
        }
        let denom = (analytic[k].abs() + numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[k] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd(f: impl Fn(&[f64]) -> f64, params: &[f64], k: usize) -> f64 {
        let h = 1e-5;
        let mut p = params.to_vec();
        p[k] += h;
        let up = f(&p);
        p[k] -= 2.0 * h;
        let down = f(&p);
        (up - down) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.scalar(0.0).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g
            .constant(
                Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        let m = Tensor::matrix(3, 3, (1..=9).map(|v| v as f64 * 0.7).collect()).unwrap();
        let mn = g.constant(m.clone()).unwrap();
        let y = g.matmul(eye, mn).unwrap();
        assert_eq!(g.value(y).data(), m.data());
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.scalar(0.0).unwrap();
        let y = g.sigmoid(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads[x.0].item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_bilinear_sum_grad_is_other_factor() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![1.5, 0.25, -0.75])).unwrap();
        let prod = g.mul(a, b).unwrap();
        let root = g.sum(prod).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads[a.0].data(), g.value(b).data());
        assert_eq!(grads[b.0].data(), g.value(a).data());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    /// Independent oracle for the two-hidden-layer tanh network: 17
    /// parameters (W1 3x2, b1 3, W2 2x3, b2 2), root = sum(tanh(W2
    /// tanh(W1 x + b1) + b2)).
    #[test]
    fn tanh_network_matches_finite_differences() {
        let x = [0.4, -0.9];
        let eval = |p: &[f64]| -> f64 {
            let mut h1 = [0.0; 3];
            for i in 0..3 {
                h1[i] = (p[i * 2] * x[0] + p[i * 2 + 1] * x[1] + p[6 + i]).tanh();
            }
            let mut out = 0.0;
            for i in 0..2 {
                let z = p[9 + i * 3] * h1[0] + p[9 + i * 3 + 1] * h1[1] + p[9 + i * 3 + 2] * h1[2]
                    + p[15 + i];
                out += z.tanh();
            }
            out
        };

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: Vec<f64> = (0..17).map(|_| rng.gen_range(-0.8..0.8)).collect();

        let mut g = Graph::new();
        let w1 = g
            .constant(Tensor::matrix(3, 2, params[0..6].to_vec()).unwrap())
            .unwrap();
        let b1 = g.constant(Tensor::vector(params[6..9].to_vec())).unwrap();
        let w2 = g
            .constant(Tensor::matrix(2, 3, params[9..15].to_vec()).unwrap())
            .unwrap();
        let b2 = g
            .constant(Tensor::vector(params[15..17].to_vec()))
            .unwrap();
        let xin = g.constant(Tensor::vector(x.to_vec())).unwrap();
        let z1 = g.matvec(w1, xin).unwrap();
        let z1 = g.add(z1, b1).unwrap();
        let h1 = g.tanh(z1).unwrap();
        let z2 = g.matvec(w2, h1).unwrap();
        let z2 = g.add(z2, b2).unwrap();
        let h2 = g.tanh(z2).unwrap();
        let root = g.sum(h2).unwrap();
        let grads = g.backward(root).unwrap();

        let analytic: Vec<f64> = [w1, b1, w2, b2]
            .iter()
            .flat_map(|id| grads[id.0].data().to_vec())
            .collect();
        for k in 0..17 {
            let numeric = fd(eval, &params, k);
            assert!(
                rel_err(analytic[k], numeric) < 1e-4,
                "param {k}: analytic {} vs numeric {}",
                analytic[k],
                numeric
            );
        }
    }

    #[test]
    fn fanout_gradients_add_over_paths() {
        // root = x*x computed via two uses of the same leaf, against a
        // graph where the leaf value is duplicated into two leaves.
        let mut g = Graph::new();
        let x = g.scalar(1.7).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();

        let mut g2 = Graph::new();
        let x1 = g2.scalar(1.7).unwrap();
        let x2 = g2.scalar(1.7).unwrap();
        let y2 = g2.mul(x1, x2).unwrap();
        let grads2 = g2.backward(y2).unwrap();

        let both = grads2[x1.0].item() + grads2[x2.0].item();
        assert!((grads[x.0].item() - both).abs() < 1e-15);
        assert!((grads[x.0].item() - 3.4).abs() < 1e-15);
    }

    #[test]
    fn unreachable_leaf_keeps_zero_gradient() {
        let mut g = Graph::new();
        let used = g.scalar(2.0).unwrap();
        let unused = g.constant(Tensor::vector(vec![5.0, 6.0])).unwrap();
        let y = g.mul(used, used).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[unused.0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let err = grad_check(1, 3, |p| {
            let mut g = Graph::new();
            let x = g.scalar(p[0])?;
            let y = g.scale(x, 3.0)?;
            Ok((g, y, vec![x]))
        })
        .unwrap();
        assert!(err <= 1e-9, "error {err}");
    }

    #[test]
    fn grad_check_softmax_attention_subgraph() {
        // Scaled-dot attention over 3 concept vectors of width 4 plus the
        // word vector: 12 parameters in the concept rows (word fixed).
        let word = [0.2, -0.4, 0.8, 0.1];
        let err = grad_check(12, 5, |p| {
            let mut g = Graph::new();
            let w = g.constant(Tensor::vector(word.to_vec()))?;
            let mut rows = Vec::new();
            for chunk in p.chunks(4) {
                rows.push(g.constant(Tensor::vector(chunk.to_vec()))?);
            }
            let mut scores = Vec::new();
            for &k in &rows {
                let d = g.dot(w, k)?;
                scores.push(g.scale(d, 1.0 / (4.0f64).sqrt())?);
            }
            let sv = g.concat(&scores)?;
            let sm = g.softmax(sv)?;
            let kmat = g.stack_rows(&rows)?;
            let mixed = g.vecmat(sm, kmat)?;
            let xt = g.add(mixed, w)?;
            let root = g.sum(xt)?;
            Ok((g, root, rows))
        })
        .unwrap();
        assert!(err <= 1e-4, "error {err}");
    }

    #[test]
    fn dropout_identity_at_rate_zero_and_masked_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]))
            .unwrap();
        let same = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(same, x);

        let dropped = g.dropout(x, 0.4, &mut rng).unwrap();
        for (&out, &orig) in g.value(dropped).data().iter().zip(g.value(x).data()) {
            let scaled = orig / 0.6;
            assert!(out == 0.0 || (out - scaled).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_deterministic_for_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vec![1.0; 64])).unwrap();
            let d = g.dropout(x, 0.2, &mut rng).unwrap();
            g.value(d).data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn bce_matches_hand_values() {
        let mut g = Graph::new();
        let p = g.scalar(0.5).unwrap();
        let l = g.bce(p, 1.0).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let p9 = g.scalar(0.9).unwrap();
        let l9 = g.bce(p9, 0.0).unwrap();
        assert!((g.value(l9).item() - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.scalar(8e307).unwrap();
        let doubled = g.add(x, x).unwrap(); // still finite
        assert!(g.add(doubled, doubled).is_err());
    }

    #[test]
    fn large_matmul_matches_finite_differences_spot_check() {
        // One 50x50 case; probe a handful of entries rather than all 2500.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f64> = (0..2500).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let b: Vec<f64> = (0..2500).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let eval = |av: &[f64]| {
            let mut g = Graph::new();
            let an = g
                .constant(Tensor::matrix(50, 50, av.to_vec()).unwrap())
                .unwrap();
            let bn = g
                .constant(Tensor::matrix(50, 50, b.clone()).unwrap())
                .unwrap();
            let c = g.matmul(an, bn).unwrap();
            let s = g.sum(c).unwrap();
            g.value(s).item()
        };
        let mut g = Graph::new();
        let an = g.constant(Tensor::matrix(50, 50, a.clone()).unwrap()).unwrap();
        let bn = g.constant(Tensor::matrix(50, 50, b.clone()).unwrap()).unwrap();
        let c = g.matmul(an, bn).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        for &k in &[0usize, 17, 333, 1249, 2499] {
            let numeric = fd(eval, &a, k);
            assert!(rel_err(grads[an.0].data()[k], numeric) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-30.0f64..30.0, 1..20)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(xs)).unwrap();
            let y = g.softmax(x).unwrap();
            let data = g.value(y).data();
            prop_assert!(data.iter().all(|&v| v > 0.0));
            let total: f64 = data.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn elementwise_ops_match_finite_differences(
            xs in proptest::collection::vec(-2.0f64..2.0, 2..12),
            which in 0usize..4,
        ) {
            let n = xs.len();
            let eval = |p: &[f64]| {
                let mut g = Graph::new();
                let x = g.constant(Tensor::vector(p.to_vec())).unwrap();
                let y = match which {
                    0 => g.tanh(x).unwrap(),
                    1 => g.sigmoid(x).unwrap(),
                    2 => g.scale(x, -1.7).unwrap(),
                    _ => g.softmax(x).unwrap(),
                };
                let s = g.sum(y).unwrap();
                // weight the sum so softmax has a nontrivial gradient
                let w = g.constant(Tensor::vector(
                    (0..g.value(y).numel()).map(|i| (i + 1) as f64 * 0.37).collect(),
                )).unwrap();
                let wy = g.mul(y, w).unwrap();
                let r = g.sum(wy).unwrap();
                let _ = s;
                g.value(r).item()
            };
            let build = |g: &mut Graph, p: &[f64]| -> Result<(NodeId, Vec<NodeId>)> {
                let x = g.constant(Tensor::vector(p.to_vec()))?;
                let y = match which {
                    0 => g.tanh(x)?,
                    1 => g.sigmoid(x)?,
                    2 => g.scale(x, -1.7)?,
                    _ => g.softmax(x)?,
                };
                let w = g.constant(Tensor::vector(
                    (0..n).map(|i| (i + 1) as f64 * 0.37).collect(),
                ))?;
                let wy = g.mul(y, w)?;
                let r = g.sum(wy)?;
                Ok((r, vec![x]))
            };
            let mut g = Graph::new();
            let (root, leaves) = build(&mut g, &xs).unwrap();
            let grads = g.backward(root).unwrap();
            for k in 0..n {
                let numeric = fd(eval, &xs, k);
                let analytic = grads[leaves[0].0].data()[k];
                prop_assert!(rel_err(analytic, numeric) < 1e-4,
                    "op {} param {}: {} vs {}", which, k, analytic, numeric);
            }
        }

        #[test]
        fn matvec_and_vecmat_match_finite_differences(
            r in 1usize..6, c in 1usize..6, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vr: Vec<f64> = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();

            // matvec wrt matrix entries
            let eval_m = |p: &[f64]| {
                let mut g = Graph::new();
                let mn = g.constant(Tensor::matrix(r, c, p.to_vec()).unwrap()).unwrap();
                let vn = g.constant(Tensor::vector(v.clone())).unwrap();
                let y = g.matvec(mn, vn).unwrap();
                let s = g.sum(y).unwrap();
                g.value(s).item()
            };
            let mut g = Graph::new();
            let mn = g.constant(Tensor::matrix(r, c, m.clone()).unwrap()).unwrap();
            let vn = g.constant(Tensor::vector(v.clone())).unwrap();
            let y = g.matvec(mn, vn).unwrap();
            let s = g.sum(y).unwrap();
            let grads = g.backward(s).unwrap();
            for k in 0..(r * c).min(8) {
                prop_assert!(rel_err(grads[mn.0].data()[k], fd(eval_m, &m, k)) < 1e-4);
            }

            // vecmat wrt the row vector
            let eval_v = |p: &[f64]| {
                let mut g = Graph::new();
                let vn = g.constant(Tensor::vector(p.to_vec())).unwrap();
                let mn = g.constant(Tensor::matrix(r, c, m.clone()).unwrap()).unwrap();
                let y = g.vecmat(vn, mn).unwrap();
                let s = g.sum(y).unwrap();
                g.value(s).item()
            };
            let mut g2 = Graph::new();
            let vn2 = g2.constant(Tensor::vector(vr.clone())).unwrap();
            let mn2 = g2.constant(Tensor::matrix(r, c, m.clone()).unwrap()).unwrap();
            let y2 = g2.vecmat(vn2, mn2).unwrap();
            let s2 = g2.sum(y2).unwrap();
            let grads2 = g2.backward(s2).unwrap();
            for k in 0..r {
                prop_assert!(rel_err(grads2[vn2.0].data()[k], fd(eval_v, &vr, k)) < 1e-4);
            }
        }

        #[test]
        fn structural_ops_match_finite_differences(seed in 0u64..500) {
            // select_row + gather + concat + mul_scalar routed into one scalar
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |p: &[f64]| {
                let mut g = Graph::new();
                let mn = g.constant(Tensor::matrix(3, 4, p.to_vec()).unwrap()).unwrap();
                let row = g.select_row(mn, 1).unwrap();
                let picked = g.gather(row, &[0, 2, 2]).unwrap();
                let srow = g.select_row(mn, 0).unwrap();
                let sc = g.sum(srow).unwrap();
                let scaled = g.mul_scalar(sc, picked).unwrap();
                let cat = g.concat(&[scaled, row]).unwrap();
                let s = g.sum(cat).unwrap();
                g.value(s).item()
            };
            let mut g = Graph::new();
            let mn = g.constant(Tensor::matrix(3, 4, m.clone()).unwrap()).unwrap();
            let row = g.select_row(mn, 1).unwrap();
            let picked = g.gather(row, &[0, 2, 2]).unwrap();
            let srow = g.select_row(mn, 0).unwrap();
            let sc = g.sum(srow).unwrap();
            let scaled = g.mul_scalar(sc, picked).unwrap();
            let cat = g.concat(&[scaled, row]).unwrap();
            let s = g.sum(cat).unwrap();
            let grads = g.backward(s).unwrap();
            for k in 0..12 {
                prop_assert!(rel_err(grads[mn.0].data()[k], fd(eval, &m, k)) < 1e-4);
            }
        }
    }
}
