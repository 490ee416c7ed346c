//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an immutable, topologically ordered list of ops. Values are
//! supplied through named bindings at [`Graph::evaluate`] time; inputs may
//! leave their leading (batch) dimension free, parameters are fixed-shape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::loss;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Named tensors bound to the graph's inputs and parameters.
pub type Bindings<'a> = HashMap<&'a str, &'a Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Bound per call. When `batched`, the bound tensor is `[n] ++ shape`.
    Input {
        name: String,
        shape: Vec<usize>,
        batched: bool,
    },
    Param {
        name: String,
        shape: Vec<usize>,
    },
    /// `[m, k] x [k, n]`.
    MatMul { a: NodeId, b: NodeId },
    /// `[N, Ci, H, W]` with kernel `[Co, Ci, Kh, Kw]`.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: usize,
    },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Adds a `[C]` bias along dimension 1.
    AddBias { input: NodeId, bias: NodeId },
    Relu { input: NodeId },
    /// Non-overlapping `size x size` average pooling over `[N, C, H, W]`.
    MeanPool { input: NodeId, size: usize },
    /// Output shape is `[total / prod(tail)] ++ tail`.
    Reshape { input: NodeId, tail: Vec<usize> },
    Scale { input: NodeId, factor: f64 },
    /// Batch-mean cross-entropy; `labels` holds class indices.
    SoftmaxCrossEntropy { logits: NodeId, labels: NodeId },
    /// Batch-mean difference-of-logits-ratio loss.
    DlrLoss { logits: NodeId, labels: NodeId },
    Sum { input: NodeId },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Relu { .. } => "relu",
            Op::MeanPool { .. } => "mean_pool",
            Op::Reshape { .. } => "reshape",
            Op::Scale { .. } => "scale",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::DlrLoss { .. } => "dlr_loss",
            Op::Sum { .. } => "sum",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Conv2d { input, kernel, .. } => vec![input, kernel],
            Op::AddBias { input, bias } => vec![input, bias],
            Op::Relu { input }
            | Op::MeanPool { input, .. }
            | Op::Reshape { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input } => vec![input],
            Op::SoftmaxCrossEntropy { logits, labels } | Op::DlrLoss { logits, labels } => {
                vec![logits, labels]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Op>,
    loss: Option<NodeId>,
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    /// Batched input: bound tensors are `[n] ++ shape`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            shape: shape.to_vec(),
            batched: true,
        })
    }

    pub fn fixed_input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input {
            name: name.to_string(),
            shape: shape.to_vec(),
            batched: false,
        })
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Param {
            name: name.to_string(),
            shape: shape.to_vec(),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b })
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push(Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b })
    }

    pub fn add_bias(&mut self, input: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias { input, bias })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Relu { input })
    }

    pub fn mean_pool(&mut self, input: NodeId, size: usize) -> NodeId {
        self.push(Op::MeanPool { input, size })
    }

    pub fn reshape(&mut self, input: NodeId, tail: &[usize]) -> NodeId {
        self.push(Op::Reshape {
            input,
            tail: tail.to_vec(),
        })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { input, factor })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, labels })
    }

    pub fn dlr_loss(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.push(Op::DlrLoss { logits, labels })
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Sum { input })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn build(self) -> Result<Graph> {
        self.finish(None)
    }

    /// Builds with `loss` designated as the graph's scalar loss.
    pub fn build_with_loss(self, loss: NodeId) -> Result<Graph> {
        self.finish(Some(loss))
    }

    fn finish(self, loss: Option<NodeId>) -> Result<Graph> {
        let mut names = std::collections::HashSet::new();
        for (i, op) in self.nodes.iter().enumerate() {
            if let Some(&p) = op.parents().iter().find(|&&p| p >= i) {
                return Err(Error::invalid(format!(
                    "node {i} ({}) refers to node {p}, which does not precede it",
                    op.kind()
                )));
            }
            if let Op::Input { name, .. } | Op::Param { name, .. } = op {
                if !names.insert(name.clone()) {
                    return Err(Error::invalid(format!("duplicate binding name `{name}`")));
                }
            }
        }
        if let Some(l) = loss {
            if l >= self.nodes.len() {
                return Err(Error::invalid(format!("loss node {l} out of range")));
            }
        }
        Ok(Graph {
            nodes: self.nodes,
            loss,
        })
    }
}

fn shape_err(node: NodeId, op: &Op, detail: impl Into<String>) -> Error {
    Error::Shape {
        node,
        op: op.kind(),
        detail: detail.into(),
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    /// Node id of the input or parameter bound under `name`.
    pub fn binding_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|op| match op {
            Op::Input { name: n, .. } | Op::Param { name: n, .. } => n == name,
            _ => false,
        })
    }

    /// `(id, name, shape)` of every parameter node in order.
    pub fn params(&self) -> Vec<(NodeId, &str, &[usize])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Param { name, shape } => Some((i, name.as_str(), shape.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn inputs(&self) -> Vec<(NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Input { name, .. } => Some((i, name.as_str())),
                _ => None,
            })
            .collect()
    }

    /// Forward values for every node, indexed by node id.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, op) in self.nodes.iter().enumerate() {
            let v = self.forward_op(id, op, &vals, bindings)?;
            vals.push(v);
        }
        Ok(vals)
    }

    fn forward_op(
        &self,
        id: NodeId,
        op: &Op,
        vals: &[Tensor],
        bindings: &Bindings,
    ) -> Result<Tensor> {
        Ok(match op {
            Op::Input {
                name,
                shape,
                batched,
            } => {
                let t = bindings
                    .get(name.as_str())
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                let ok = if *batched {
                    t.rank() == shape.len() + 1 && &t.shape()[1..] == shape.as_slice()
                } else {
                    t.shape() == shape.as_slice()
                };
                if !ok {
                    return Err(shape_err(
                        id,
                        op,
                        format!(
                            "`{name}` expects {}{:?}, got {:?}",
                            if *batched { "[n] ++ " } else { "" },
                            shape,
                            t.shape()
                        ),
                    ));
                }
                (*t).clone()
            }
            Op::Param { name, shape } => {
                let t = bindings
                    .get(name.as_str())
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(shape_err(
                        id,
                        op,
                        format!("`{name}` expects {:?}, got {:?}", shape, t.shape()),
                    ));
                }
                (*t).clone()
            }
            Op::MatMul { a, b } => {
                let (a, b) = (&vals[*a], &vals[*b]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err(
                        id,
                        op,
                        format!("{:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![0.0; m * n];
                kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
                Tensor::new(vec![m, n], c)?
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let g = conv_geometry(id, op, &vals[*input], &vals[*kernel], *stride, *pad)?;
                let out = kernels::conv2d_forward(vals[*input].data(), vals[*kernel].data(), &g);
                Tensor::new(vec![g.batch, g.out_channels, g.out_h(), g.out_w()], out)?
            }
            Op::Add { a, b } => vals[*a]
                .zip_map(&vals[*b], |x, y| x + y)
                .map_err(|e| shape_err(id, op, e.to_string()))?,
            Op::Mul { a, b } => vals[*a]
                .zip_map(&vals[*b], |x, y| x * y)
                .map_err(|e| shape_err(id, op, e.to_string()))?,
            Op::AddBias { input, bias } => {
                let (x, b) = (&vals[*input], &vals[*bias]);
                if x.rank() < 2 || b.rank() != 1 || b.len() != x.shape()[1] {
                    return Err(shape_err(
                        id,
                        op,
                        format!("input {:?}, bias {:?}", x.shape(), b.shape()),
                    ));
                }
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let mut out = x.clone();
                for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                    let bv = b.data()[chunk_idx % c];
                    for v in chunk {
                        *v += bv;
                    }
                }
                out
            }
            Op::Relu { input } => vals[*input].map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::MeanPool { input, size } => {
                let x = &vals[*input];
                let s = x.shape();
                if x.rank() != 4 || *size == 0 || s[2] % size != 0 || s[3] % size != 0 {
                    return Err(shape_err(
                        id,
                        op,
                        format!("cannot pool {:?} by {}", s, size),
                    ));
                }
                let out = kernels::mean_pool_forward(x.data(), s[0] * s[1], s[2], s[3], *size);
                Tensor::new(vec![s[0], s[1], s[2] / size, s[3] / size], out)?
            }
            Op::Reshape { input, tail } => {
                let x = &vals[*input];
                let shape = reshape_target(x.len(), tail)
                    .ok_or_else(|| shape_err(id, op, format!("{:?} into [?] ++ {:?}", x.shape(), tail)))?;
                x.clone().reshape(shape)?
            }
            Op::Scale { input, factor } => vals[*input].map(|v| v * factor),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let (z, y) = self.loss_operands(id, op, vals, *logits, *labels)?;
                let l = loss::cross_entropy_per_sample(z, &y)?;
                Tensor::scalar(l.iter().sum::<f64>() / l.len() as f64)
            }
            Op::DlrLoss { logits, labels } => {
                let (z, y) = self.loss_operands(id, op, vals, *logits, *labels)?;
                let l = loss::dlr_per_sample(z, &y)?;
                Tensor::scalar(l.iter().sum::<f64>() / l.len() as f64)
            }
            Op::Sum { input } => Tensor::scalar(vals[*input].sum()),
        })
    }

    fn loss_operands<'v>(
        &self,
        id: NodeId,
        op: &Op,
        vals: &'v [Tensor],
        logits: NodeId,
        labels: NodeId,
    ) -> Result<(&'v Tensor, Vec<usize>)> {
        let z = &vals[logits];
        let y = &vals[labels];
        if z.rank() != 2 || y.rank() != 1 || y.len() != z.shape()[0] || z.shape()[0] == 0 {
            return Err(shape_err(
                id,
                op,
                format!("logits {:?}, labels {:?}", z.shape(), y.shape()),
            ));
        }
        let y = loss::labels_from_tensor(y, z.shape()[1]).map_err(|e| shape_err(id, op, e.to_string()))?;
        Ok((z, y))
    }

    /// Gradients of the scalar `loss` node with respect to every node.
    pub fn backward(&self, loss: NodeId, values: &[Tensor]) -> Result<Vec<Option<Tensor>>> {
        let lv = values
            .get(loss)
            .ok_or_else(|| Error::invalid(format!("loss node {loss} has no forward value")))?;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss,
                shape: lv.shape().to_vec(),
            });
        }
        self.backward_from(loss, Tensor::full(lv.shape(), 1.0), values, None)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`'s
    /// value) back through the graph. With `wrt`, only gradients on paths
    /// from those nodes to `root` are computed.
    pub fn backward_from(
        &self,
        root: NodeId,
        seed: Tensor,
        values: &[Tensor],
        wrt: Option<&[NodeId]>,
    ) -> Result<Vec<Option<Tensor>>> {
        if values.len() != self.nodes.len() {
            return Err(Error::invalid("forward values do not match the graph"));
        }
        if seed.shape() != values[root].shape() {
            return Err(Error::invalid(format!(
                "seed shape {:?} differs from node {root} shape {:?}",
                seed.shape(),
                values[root].shape()
            )));
        }
        let needs: Vec<bool> = match wrt {
            None => vec![true; self.nodes.len()],
            Some(targets) => {
                let mut needs = vec![false; self.nodes.len()];
                for (i, op) in self.nodes.iter().enumerate() {
                    needs[i] = targets.contains(&i) || op.parents().iter().any(|&p| needs[p]);
                }
                needs
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            if !needs[id] {
                grads[id] = Some(g);
                continue;
            }
            self.backward_op(id, &g, values, &needs, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn backward_op(
        &self,
        id: NodeId,
        g: &Tensor,
        vals: &[Tensor],
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |node: NodeId, t: Tensor| {
            if !needs[node] {
                return;
            }
            match &mut grads[node] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &self.nodes[id] {
            Op::Input { .. } | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&vals[*a], &vals[*b]);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs[*a] {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    acc(*a, Tensor::new(vec![m, k], da)?);
                }
                if needs[*b] {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    acc(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let op = &self.nodes[id];
                let geo = conv_geometry(id, op, &vals[*input], &vals[*kernel], *stride, *pad)?;
                let (dx, dw) = kernels::conv2d_backward(
                    vals[*input].data(),
                    vals[*kernel].data(),
                    g.data(),
                    &geo,
                    needs[*input],
                    needs[*kernel],
                );
                if let Some(dx) = dx {
                    acc(*input, Tensor::new(vals[*input].shape().to_vec(), dx)?);
                }
                if let Some(dw) = dw {
                    acc(*kernel, Tensor::new(vals[*kernel].shape().to_vec(), dw)?);
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                if needs[*a] {
                    acc(*a, g.zip_map(&vals[*b], |x, y| x * y)?);
                }
                if needs[*b] {
                    acc(*b, g.zip_map(&vals[*a], |x, y| x * y)?);
                }
            }
            Op::AddBias { input, bias } => {
                acc(*input, g.clone());
                if needs[*bias] {
                    let c = vals[*bias].len();
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                        db[chunk_idx % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*bias, Tensor::vector(db));
                }
            }
            Op::Relu { input } => {
                acc(*input, g.zip_map(&vals[*input], |gv, x| if x > 0.0 { gv } else { 0.0 })?);
            }
            Op::MeanPool { input, size } => {
                let s = vals[*input].shape();
                let dx = kernels::mean_pool_backward(g.data(), s[0] * s[1], s[2], s[3], *size);
                acc(*input, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Reshape { input, .. } => {
                acc(*input, g.clone().reshape(vals[*input].shape().to_vec())?);
            }
            Op::Scale { input, factor } => acc(*input, g.map(|v| v * factor)),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let op = &self.nodes[id];
                let (z, y) = self.loss_operands(id, op, vals, *logits, *labels)?;
                let mut d = loss::cross_entropy_grad(z, &y)?;
                d.scale_in_place(g.item() / y.len() as f64);
                acc(*logits, d);
            }
            Op::DlrLoss { logits, labels } => {
                let op = &self.nodes[id];
                let (z, y) = self.loss_operands(id, op, vals, *logits, *labels)?;
                let mut d = loss::dlr_grad(z, &y)?;
                d.scale_in_place(g.item() / y.len() as f64);
                acc(*logits, d);
            }
            Op::Sum { input } => acc(*input, Tensor::full(vals[*input].shape(), g.item())),
        }
        Ok(())
    }
}

fn conv_geometry(
    id: NodeId,
    op: &Op,
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] {
        return Err(shape_err(
            id,
            op,
            format!("input {:?}, kernel {:?}", x.shape(), k.shape()),
        ));
    }
    let g = ConvGeometry {
        batch: x.shape()[0],
        in_channels: x.shape()[1],
        height: x.shape()[2],
        width: x.shape()[3],
        out_channels: k.shape()[0],
        kernel_h: k.shape()[2],
        kernel_w: k.shape()[3],
        stride,
        pad,
    };
    if !g.valid() {
        return Err(shape_err(id, op, "kernel larger than padded input or zero stride"));
    }
    Ok(g)
}

fn reshape_target(total: usize, tail: &[usize]) -> Option<Vec<usize>> {
    let t: usize = tail.iter().product();
    if t == 0 || total % t != 0 {
        return None;
    }
    let mut s = Vec::with_capacity(tail.len() + 1);
    s.push(total / t);
    s.extend_from_slice(tail);
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind<'a>(pairs: &[(&'a str, &'a Tensor)]) -> Bindings<'a> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn identity_matmul() {
        let mut b = GraphBuilder::new();
        let w = b.param("w", &[3, 3]);
        let v = b.fixed_input("v", &[3, 1]);
        let out = b.matmul(w, v);
        let g = b.build().unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let v_t = Tensor::new(vec![3, 1], vec![1., 2., 3.]).unwrap();
        let vals = g.evaluate(&bind(&[("w", &eye), ("v", &v_t)])).unwrap();
        assert_eq!(vals[out].data(), &[1., 2., 3.]);
    }

    #[test]
    fn relu_forward() {
        let mut b = GraphBuilder::new();
        let x = b.fixed_input("x", &[3]);
        let r = b.relu(x);
        let g = b.build().unwrap();
        let xt = Tensor::vector(vec![-1., 0., 2.]);
        let vals = g.evaluate(&bind(&[("x", &xt)])).unwrap();
        assert_eq!(vals[r].data(), &[0., 0., 2.]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut b = GraphBuilder::new();
        let z = b.input("z", &[4]);
        let y = b.input("y", &[]);
        let l = b.softmax_cross_entropy(z, y);
        let g = b.build_with_loss(l).unwrap();
        let zt = Tensor::zeros(&[1, 4]);
        let yt = Tensor::vector(vec![2.0]);
        let vals = g.evaluate(&bind(&[("z", &zt), ("y", &yt)])).unwrap();
        assert!((vals[l].item() - 4f64.ln()).abs() < 1e-15);
        assert!((vals[l].item() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn square_sum_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.fixed_input("x", &[1]);
        let sq = b.mul(x, x);
        let l = b.sum(sq);
        let g = b.build_with_loss(l).unwrap();
        let xt = Tensor::vector(vec![3.0]);
        let vals = g.evaluate(&bind(&[("x", &xt)])).unwrap();
        let grads = g.backward(l, &vals).unwrap();
        assert_eq!(grads[x].as_ref().unwrap().data(), &[6.0]);
        assert_eq!(grads[l].as_ref().unwrap().data(), &[1.0]);
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let mut b = GraphBuilder::new();
        let z = b.input("z", &[2]);
        let y = b.input("y", &[]);
        let l = b.softmax_cross_entropy(z, y);
        let g = b.build_with_loss(l).unwrap();
        let zt = Tensor::zeros(&[1, 2]);
        let yt = Tensor::vector(vec![0.0]);
        let vals = g.evaluate(&bind(&[("z", &zt), ("y", &yt)])).unwrap();
        let grads = g.backward(l, &vals).unwrap();
        assert_eq!(grads[z].as_ref().unwrap().data(), &[-0.5, 0.5]);
        assert!(grads[y].is_none());
    }

    #[test]
    fn errors_name_the_node() {
        let mut b = GraphBuilder::new();
        let a = b.fixed_input("a", &[2, 3]);
        let c = b.fixed_input("c", &[2, 3]);
        let m = b.matmul(a, c);
        let g = b.build().unwrap();
        let t = Tensor::zeros(&[2, 3]);
        match g.evaluate(&bind(&[("a", &t), ("c", &t)])) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, m);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            g.evaluate(&bind(&[("a", &t)])),
            Err(Error::UnboundInput(name)) if name == "c"
        ));
        let bad = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            g.evaluate(&bind(&[("a", &bad), ("c", &t)])),
            Err(Error::Shape { node: 0, .. })
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.fixed_input("x", &[2]);
        let r = b.relu(x);
        let g = b.build().unwrap();
        let xt = Tensor::vector(vec![1.0, 2.0]);
        let vals = g.evaluate(&bind(&[("x", &xt)])).unwrap();
        assert!(matches!(
            g.backward(r, &vals),
            Err(Error::NonScalarLoss { node, .. }) if node == r
        ));
    }

    #[test]
    fn builder_rejects_forward_references_and_duplicate_names() {
        let mut b = GraphBuilder::new();
        b.push(Op::Relu { input: 0 });
        assert!(b.build().is_err());
        let mut b = GraphBuilder::new();
        b.fixed_input("x", &[1]);
        b.param("x", &[1]);
        assert!(b.build().is_err());
    }

    #[test]
    fn wrt_restricts_gradient_work() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]);
        let w = b.param("w", &[2, 2]);
        let h = b.matmul(x, w);
        let l = b.sum(h);
        let g = b.build_with_loss(l).unwrap();
        let xt = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let wt = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let vals = g.evaluate(&bind(&[("x", &xt), ("w", &wt)])).unwrap();
        let grads = g
            .backward_from(l, Tensor::scalar(1.0), &vals, Some(&[x]))
            .unwrap();
        assert!(grads[w].is_none());
        assert_eq!(grads[x].as_ref().unwrap().data(), &[1.0, 1.0]);
    }
}
