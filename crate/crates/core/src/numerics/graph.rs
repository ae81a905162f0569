//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op is evaluated eagerly when it is recorded, so a node's value is
//! available as soon as its id is returned. Inputs always carry smaller ids
//! than the node consuming them, which makes the tape its own topological
//! order for the backward sweep.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Conv1d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    MeanOverTime(NodeId),
    Standardize {
        input: NodeId,
        inv_std: Vec<S>,
    },
    StopGradient(NodeId),
    RowCosine {
        p: NodeId,
        z: NodeId,
        p_norm: Vec<S>,
        z_norm: Vec<S>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumSquares(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    BceWithLogits {
        logits: NodeId,
        labels: Vec<S>,
    },
    Reshape(NodeId),
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::MeanOverTime(a)
            | Op::StopGradient(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::Reshape(a)
            | Op::Standardize { input: a, .. }
            | Op::SoftmaxCrossEntropy { logits: a, .. }
            | Op::BceWithLogits { logits: a, .. } => vec![*a],
            Op::Conv1d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::RowCosine { p, z, .. } => vec![*p, *z],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Conv1d { .. } => "conv1d",
            Op::MeanOverTime(..) => "mean_over_time",
            Op::Standardize { .. } => "standardize",
            Op::StopGradient(..) => "stop_gradient",
            Op::RowCosine { .. } => "cosine_similarity",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumSquares(..) => "sum_squares",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    t_in: usize,
    c_in: usize,
    t_out: usize,
    c_out: usize,
    width: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
    stop_gradient: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `id`. Nodes the root does not
    /// depend on (or only depends on through a stop-gradient) get zeros.
    pub fn get(&self, id: NodeId) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind on later lookups.
    pub fn take(&mut self, id: NodeId) -> Tensor<S> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    /// Whether any nonzero contribution reached `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rank2<S: Scalar>(op: &'static str, a: &Tensor<S>) -> Result<(usize, usize)> {
    match *a.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", a.shape()))),
    }
}

fn rank3<S: Scalar>(op: &'static str, a: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *a.shape() {
        [b, t, c] => Ok((b, t, c)),
        _ => Err(Error::shape(op, format!("expected rank 3, got {:?}", a.shape()))),
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_stop_gradient(&self, id: NodeId) -> bool {
        self.nodes[id.0].stop_gradient
    }

    /// Operation tag of a node.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Nodes `id` was computed from.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{} (forward, node {})", op.name(), self.nodes.len()),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            stop_gradient: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad,
            stop_gradient: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), out, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), out, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), out, rg)
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", va)?;
        let (k2, n) = rank2("matmul", vb)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m, k, n, S::one(), va.data(), k as isize, 1, vb.data(), n as isize, 1, S::zero(),
            &mut out, n as isize, 1,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), out, rg)
    }

    /// Adds a length-`n` bias to every row of a tensor whose last axis is `n`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = *va.shape().last().unwrap_or(&0);
        if vb.shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, &b) in row.iter_mut().zip(vb.data()) {
                *x = *x + b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        self.push(Op::AddBias(a, bias), out, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), out, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(Op::Sigmoid(a), out, rg)
    }

    /// Batched 1-D cross-correlation.
    ///
    /// `input` is `[B, T, C_in]`, `kernel` is `[K, C_in, C_out]`, `bias` is
    /// `[C_out]`. Output is `[B, T', C_out]` with
    /// `T' = (T + 2 * padding - K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (vx, vk) = (self.value(input), self.value(kernel));
        let (batch, t_in, c_in) = rank3("conv1d", vx)?;
        let (width, kc_in, c_out) = rank3("conv1d", vk)?;
        if kc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} vs kernel {:?}", vx.shape(), vk.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be positive"));
        }
        if width == 0 || width > t_in + 2 * padding {
            return Err(Error::shape(
                "conv1d",
                format!("kernel width {width} exceeds padded input length {}", t_in + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {:?} for {c_out} output channels", self.value(b).shape()),
                ));
            }
        }
        let t_out = (t_in + 2 * padding - width) / stride + 1;
        let geom = ConvGeom {
            batch,
            t_in,
            c_in,
            t_out,
            c_out,
            width,
            stride,
            padding,
        };
        let cols = im2col(vx.data(), &geom);
        let rows = batch * t_out;
        let kdim = width * c_in;
        let mut out = vec![S::zero(); rows * c_out];
        S::gemm(
            rows, kdim, c_out, S::one(), &cols, kdim as isize, 1, vk.data(), c_out as isize, 1,
            S::zero(), &mut out, c_out as isize, 1,
        );
        if let Some(b) = bias {
            let vb = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                for (x, &bv) in row.iter_mut().zip(vb) {
                    *x = *x + bv;
                }
            }
        }
        let out = Tensor::new(vec![batch, t_out, c_out], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Op::Conv1d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            out,
            rg,
        )
    }

    /// Global average pooling: `[B, T, C] -> [B, C]`.
    pub fn mean_over_time(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (b, t, c) = rank3("mean_over_time", va)?;
        let inv = S::one() / S::of(t as f64);
        let mut out = vec![S::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for ti in 0..t {
                let row = &va.data()[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for (x, &v) in o.iter_mut().zip(row) {
                    *x = *x + v;
                }
            }
            for x in o.iter_mut() {
                *x = *x * inv;
            }
        }
        let out = Tensor::new(vec![b, c], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::MeanOverTime(a), out, rg)
    }

    /// Per-column standardization over the batch axis of a `[B, D]` tensor,
    /// with no learned affine part.
    pub fn standardize(&mut self, a: NodeId, eps: S) -> Result<NodeId> {
        let va = self.value(a);
        let (b, d) = rank2("standardize", va)?;
        if b < 2 {
            return Err(Error::Degenerate {
                op: "standardize",
                detail: "batch of fewer than two rows".into(),
            });
        }
        let nb = S::of(b as f64);
        let mut mean = vec![S::zero(); d];
        for i in 0..b {
            for (m, &v) in mean.iter_mut().zip(va.row(i)) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nb);
        let mut var = vec![S::zero(); d];
        for i in 0..b {
            for ((s, &v), &m) in var.iter_mut().zip(va.row(i)).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&s| S::one() / (s / nb + eps).sqrt()).collect();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((x, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * is;
            }
        }
        let out = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(&[a]);
        self.push(Op::Standardize { input: a, inv_std }, out, rg)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).clone();
        let id = self.push(Op::StopGradient(a), out, false)?;
        self.nodes[id.0].stop_gradient = true;
        Ok(id)
    }

    /// Row-wise cosine similarity of two `[B, D]` tensors, giving `[B]`.
    /// Rank-1 inputs are treated as a single row.
    pub fn cosine_similarity(&mut self, p: NodeId, z: NodeId) -> Result<NodeId> {
        let (vp, vz) = (self.value(p), self.value(z));
        same_shape("cosine_similarity", vp, vz)?;
        let d = *vp.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape("cosine_similarity", "empty vectors"));
        }
        let rows = vp.len() / d;
        let mut out = Vec::with_capacity(rows);
        let mut p_norm = Vec::with_capacity(rows);
        let mut z_norm = Vec::with_capacity(rows);
        for (pr, zr) in vp.data().chunks(d).zip(vz.data().chunks(d)) {
            let np = pr.iter().map(|&v| v * v).sum::<S>().sqrt();
            let nz = zr.iter().map(|&v| v * v).sum::<S>().sqrt();
            if np == S::zero() || nz == S::zero() {
                return Err(Error::Degenerate {
                    op: "cosine_similarity",
                    detail: "zero-norm embedding".into(),
                });
            }
            let dot: S = pr.iter().zip(zr).map(|(&a, &b)| a * b).sum();
            out.push(dot / (np * nz));
            p_norm.push(np);
            z_norm.push(nz);
        }
        let out = Tensor::vector(out);
        let rg = self.rg(&[p, z]);
        self.push(
            Op::RowCosine {
                p,
                z,
                p_norm,
                z_norm,
            },
            out,
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), out, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(va.sum() / S::of(va.len() as f64));
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), out, rg)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum_squares());
        let rg = self.rg(&[a]);
        self.push(Op::SumSquares(a), out, rg)
    }

    /// Mean softmax cross-entropy of `[B, N]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (b, n) = rank2("softmax_cross_entropy", vl)?;
        if labels.len() != b || labels.iter().any(|&y| y >= n) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), vl.shape()),
            ));
        }
        let probs = softmax_rows(vl.data(), n);
        let mut loss = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = vl.row(i);
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            loss = loss + lse - row[y];
        }
        let out = Tensor::scalar(loss / S::of(b as f64));
        let rg = self.rg(&[logits]);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
            rg,
        )
    }

    /// Mean binary cross-entropy of logits (any shape) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[S]) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.len() != labels.len() || vl.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} labels for logits {:?}", labels.len(), vl.shape()),
            ));
        }
        let mut loss = S::zero();
        for (&l, &y) in vl.data().iter().zip(labels) {
            loss = loss + l.max(S::zero()) - l * y + (S::one() + (-l.abs()).exp()).ln();
        }
        let out = Tensor::scalar(loss / S::of(labels.len() as f64));
        let rg = self.rg(&[logits]);
        self.push(
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            out,
            rg,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(Op::Reshape(a), out, rg)
    }

    /// Gradient of a scalar `root` with respect to every node that requires one.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", rv.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(rv.shape(), S::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.input_grads(node, &g) {
                if !contrib.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("{} (backward, node {i})", node.op.name()),
                    });
                }
                accumulate(&mut grads[input.0], contrib);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of one node against its differentiable inputs.
    fn input_grads(&self, node: &Node<S>, g: &Tensor<S>) -> Vec<(NodeId, Tensor<S>)> {
        let mut out = Vec::new();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                for &id in [a, b] {
                    if wants(id) {
                        out.push((id, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    out.push((*a, zip_with(g, val(*b), |x, y| x * y)));
                }
                if wants(*b) {
                    out.push((*b, zip_with(g, val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let c = *c;
                    out.push((*a, g.map(|v| v * c)));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    // dA = G @ B^T
                    let mut da = vec![S::zero(); m * k];
                    S::gemm(
                        m, n, k, S::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize,
                        S::zero(), &mut da, k as isize, 1,
                    );
                    out.push((*a, Tensor::new(vec![m, k], da).expect("shape")));
                }
                if wants(*b) {
                    // dB = A^T @ G
                    let mut db = vec![S::zero(); k * n];
                    S::gemm(
                        k, m, n, S::one(), va.data(), 1, k as isize, g.data(), n as isize, 1,
                        S::zero(), &mut db, n as isize, 1,
                    );
                    out.push((*b, Tensor::new(vec![k, n], db).expect("shape")));
                }
            }
            Op::AddBias(a, bias) => {
                if wants(*a) {
                    out.push((*a, g.clone()));
                }
                if wants(*bias) {
                    out.push((*bias, column_sums(g.data(), val(*bias).len())));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    out.push((
                        *a,
                        zip_with(g, val(*a), |gv, x| if x > S::zero() { gv } else { S::zero() }),
                    ));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    out.push((
                        *a,
                        zip_with(g, &node.value, |gv, s| gv * s * (S::one() - s)),
                    ));
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.batch * geom.t_out;
                let kdim = geom.width * geom.c_in;
                let c_out = geom.c_out;
                if wants(*kernel) {
                    // dW = cols^T @ G
                    let mut dw = vec![S::zero(); kdim * c_out];
                    S::gemm(
                        kdim, rows, c_out, S::one(), cols, 1, kdim as isize, g.data(),
                        c_out as isize, 1, S::zero(), &mut dw, c_out as isize, 1,
                    );
                    out.push((
                        *kernel,
                        Tensor::new(vec![geom.width, geom.c_in, c_out], dw).expect("shape"),
                    ));
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        out.push((*b, column_sums(g.data(), c_out)));
                    }
                }
                if wants(*input) {
                    // dcols = G @ W^T, then scatter back.
                    let vk = val(*kernel);
                    let mut dcols = vec![S::zero(); rows * kdim];
                    S::gemm(
                        rows, c_out, kdim, S::one(), g.data(), c_out as isize, 1, vk.data(), 1,
                        c_out as isize, S::zero(), &mut dcols, kdim as isize, 1,
                    );
                    let dx = col2im(&dcols, geom);
                    out.push((
                        *input,
                        Tensor::new(vec![geom.batch, geom.t_in, geom.c_in], dx).expect("shape"),
                    ));
                }
            }
            Op::MeanOverTime(a) => {
                if wants(*a) {
                    let va = val(*a);
                    let (b, t, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let inv = S::one() / S::of(t as f64);
                    let mut dx = vec![S::zero(); b * t * c];
                    for bi in 0..b {
                        let grow = &g.data()[bi * c..(bi + 1) * c];
                        for ti in 0..t {
                            let drow = &mut dx[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = gv * inv;
                            }
                        }
                    }
                    out.push((*a, Tensor::new(vec![b, t, c], dx).expect("shape")));
                }
            }
            Op::Standardize { input, inv_std } => {
                if wants(*input) {
                    let y = &node.value;
                    let (b, d) = (y.shape()[0], y.shape()[1]);
                    let nb = S::of(b as f64);
                    let mut sum_g = vec![S::zero(); d];
                    let mut sum_gy = vec![S::zero(); d];
                    for i in 0..b {
                        for j in 0..d {
                            let gv = g.data()[i * d + j];
                            sum_g[j] = sum_g[j] + gv;
                            sum_gy[j] = sum_gy[j] + gv * y.data()[i * d + j];
                        }
                    }
                    let mut dx = vec![S::zero(); b * d];
                    for i in 0..b {
                        for j in 0..d {
                            let k = i * d + j;
                            dx[k] = inv_std[j] / nb
                                * (nb * g.data()[k] - sum_g[j] - y.data()[k] * sum_gy[j]);
                        }
                    }
                    out.push((*input, Tensor::new(vec![b, d], dx).expect("shape")));
                }
            }
            Op::RowCosine {
                p,
                z,
                p_norm,
                z_norm,
            } => {
                let (vp, vz) = (val(*p), val(*z));
                let d = *vp.shape().last().expect("rank >= 1");
                let cos = node.value.data();
                for (target, this, other, n_this, n_other) in [
                    (*p, vp, vz, p_norm, z_norm),
                    (*z, vz, vp, z_norm, p_norm),
                ] {
                    if !wants(target) {
                        continue;
                    }
                    let mut dx = vec![S::zero(); this.len()];
                    for r in 0..cos.len() {
                        let scale_other = g.data()[r] / (n_this[r] * n_other[r]);
                        let scale_this = g.data()[r] * cos[r] / (n_this[r] * n_this[r]);
                        for j in r * d..(r + 1) * d {
                            dx[j] = scale_other * other.data()[j] - scale_this * this.data()[j];
                        }
                    }
                    out.push((target, Tensor::new(this.shape().to_vec(), dx).expect("shape")));
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    out.push((*a, Tensor::full(val(*a).shape(), g.item())));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let va = val(*a);
                    out.push((
                        *a,
                        Tensor::full(va.shape(), g.item() / S::of(va.len() as f64)),
                    ));
                }
            }
            Op::SumSquares(a) => {
                if wants(*a) {
                    let two_g = g.item() + g.item();
                    out.push((*a, val(*a).map(|x| two_g * x)));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let shape = val(*logits).shape().to_vec();
                    let n = shape[1];
                    let scale = g.item() / S::of(labels.len() as f64);
                    let mut dx = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * n + y] = dx[i * n + y] - S::one();
                    }
                    dx.iter_mut().for_each(|v| *v = *v * scale);
                    out.push((*logits, Tensor::new(shape, dx).expect("shape")));
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if wants(*logits) {
                    let vl = val(*logits);
                    let scale = g.item() / S::of(labels.len() as f64);
                    let dx = vl
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&l, &y)| (sigmoid(l) - y) * scale)
                        .collect();
                    out.push((*logits, Tensor::new(vl.shape().to_vec(), dx).expect("shape")));
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    out.push((*a, g.clone().reshape(val(*a).shape()).expect("shape")));
                }
            }
        }
        out
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, contrib: Tensor<S>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a = *a + c;
            }
        }
    }
}

fn zip_with<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

fn column_sums<S: Scalar>(data: &[S], n: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); n];
    for row in data.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::vector(out)
}

/// Row-wise softmax of a flat `[rows, n]` buffer.
pub fn softmax_rows<S: Scalar>(data: &[S], n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        let mut z = S::zero();
        for &v in row {
            let e = (v - m).exp();
            z = z + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / z);
    }
    out
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let kdim = g.width * g.c_in;
    let mut cols = vec![S::zero(); g.batch * g.t_out * kdim];
    for b in 0..g.batch {
        for t in 0..g.t_out {
            let row = &mut cols[(b * g.t_out + t) * kdim..(b * g.t_out + t + 1) * kdim];
            for k in 0..g.width {
                let src = (t * g.stride + k) as isize - g.padding as isize;
                if src < 0 || src as usize >= g.t_in {
                    continue;
                }
                let base = (b * g.t_in + src as usize) * g.c_in;
                row[k * g.c_in..(k + 1) * g.c_in].copy_from_slice(&x[base..base + g.c_in]);
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom) -> Vec<S> {
    let kdim = g.width * g.c_in;
    let mut dx = vec![S::zero(); g.batch * g.t_in * g.c_in];
    for b in 0..g.batch {
        for t in 0..g.t_out {
            let row = &cols[(b * g.t_out + t) * kdim..(b * g.t_out + t + 1) * kdim];
            for k in 0..g.width {
                let src = (t * g.stride + k) as isize - g.padding as isize;
                if src < 0 || src as usize >= g.t_in {
                    continue;
                }
                let base = (b * g.t_in + src as usize) * g.c_in;
                for (d, &v) in dx[base..base + g.c_in]
                    .iter_mut()
                    .zip(&row[k * g.c_in..(k + 1) * g.c_in])
                {
                    *d = *d + v;
                }
            }
        }
    }
    dx
}
