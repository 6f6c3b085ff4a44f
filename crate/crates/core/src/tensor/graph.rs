//! Reverse-mode differentiation over an explicitly recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`], so building a graph never
//! copies weights. Operations that are specific to a layer or loss plug in
//! through [`CustomOp`].

use std::borrow::Cow;

use super::kernels::{self, Pointwise};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros_like(&value);
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// An operation whose forward and vector-Jacobian product are supplied by
/// the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradients for each input given the upstream gradient. Entries may be
    /// `None` for inputs that are not differentiable.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, pad: usize },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Pointwise { input: NodeId, f: Pointwise },
    L2Normalize { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    Sum { input: NodeId },
    GlobalAvgPool { input: NodeId },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(NodeId, ParamId)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take_node(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }

    /// Parameter gradients, summed over every leaf that refers to the same
    /// parameter.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        self.param_nodes
            .iter()
            .filter_map(|&(n, p)| self.grads[n.0].as_ref().map(|g| (p, g)))
            .collect()
    }

    /// Adds parameter gradients into `sink[param_id]`.
    pub fn accumulate_into(&self, sink: &mut [Option<Tensor>]) {
        for (p, g) in self.params() {
            match &mut sink[p.0] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x > 0` for every entry of every ReLU input, in node order. Two
    /// graphs with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Pointwise { input, f: Pointwise::Relu } = node.op {
                out.extend(self.value(input).data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite value produced by node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Input, false)
            .expect("graph inputs must be finite")
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Input, true)
            .expect("graph inputs must be finite")
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = &self.params.get(id).value;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Param(id),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        let rg = self.needs(&[input, kernel]);
        self.push(Cow::Owned(out), Op::Conv2d { input, kernel, stride, pad }, rg)
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let out = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        self.push(Cow::Owned(out), Op::Linear { input, weight, bias }, rg)
    }

    pub fn pointwise(&mut self, input: NodeId, f: Pointwise) -> Result<NodeId> {
        let out = kernels::pointwise(self.value(input), f);
        let rg = self.needs(&[input]);
        self.push(Cow::Owned(out), Op::Pointwise { input, f }, rg)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.pointwise(input, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        self.pointwise(input, Pointwise::Sigmoid)
    }

    pub fn l2_normalize(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::l2_normalize(self.value(input))?;
        let rg = self.needs(&[input]);
        self.push(Cow::Owned(out), Op::L2Normalize { input }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.needs(&[a, b]);
        self.push(Cow::Owned(out), Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        let mut out = self.value(input).clone();
        out.scale(factor);
        let rg = self.needs(&[input]);
        self.push(Cow::Owned(out), Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(Cow::Owned(out), Op::Sum { input }, rg)
    }

    /// `c x h x w` to a length-`c` vector of spatial means.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.rank() != 3 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 3, got {:?}", v.shape())));
        }
        let c = v.shape()[0];
        let area = (v.shape()[1] * v.shape()[2]) as f64;
        let out: Vec<f64> = (0..c).map(|i| v.row(i).iter().sum::<f64>() / area).collect();
        let rg = self.needs(&[input]);
        self.push(Cow::Owned(Tensor::vector(&out)), Op::GlobalAvgPool { input }, rg)
    }

    pub fn custom(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp>) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&values)?;
        let rg = self.needs(inputs);
        self.push(
            Cow::Owned(out),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let v = self.value(output);
        if !v.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", v.shape()),
            ));
        }
        self.backward_with(output, Tensor::full(v.shape(), 1.0))
    }

    /// Backpropagates an explicit upstream gradient for `output`.
    pub fn backward_with(&self, output: NodeId, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let param_nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((NodeId(i), p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, param_nodes })
    }

    fn propagate(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let send = |id: NodeId, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { input, kernel, stride, pad } => {
                let need_input = self.nodes[input.0].requires_grad;
                let (gi, gk) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    *stride,
                    *pad,
                    g,
                    need_input,
                )?;
                if let Some(gi) = gi {
                    send(*input, gi, grads);
                }
                send(*kernel, gk, grads);
            }
            Op::Linear { input, weight, bias } => {
                let (gi, gw, gb) = kernels::linear_backward(self.value(*input), self.value(*weight), g);
                send(*input, gi, grads);
                send(*weight, gw, grads);
                if let Some(b) = bias {
                    let gb = gb.reshape(self.value(*b).shape())?;
                    send(*b, gb, grads);
                }
            }
            Op::Pointwise { input, f } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                    .collect();
                send(*input, Tensor::new(x.shape().to_vec(), data)?, grads);
            }
            Op::L2Normalize { input } => {
                let gi = kernels::l2_normalize_backward(self.value(*input), &node.value, g);
                send(*input, gi, grads);
            }
            Op::Add { a, b } => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Scale { input, factor } => {
                let mut gi = g.clone();
                gi.scale(*factor);
                send(*input, gi, grads);
            }
            Op::Sum { input } => {
                let shape = self.value(*input).shape();
                send(*input, Tensor::full(shape, g.item()), grads);
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let area = x.shape()[1] * x.shape()[2];
                let mut gi = Tensor::zeros_like(x);
                for c in 0..x.shape()[0] {
                    let v = g.data()[c] / area as f64;
                    gi.row_mut(c).iter_mut().for_each(|e| *e = v);
                }
                send(*input, gi, grads);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&values, &node.value, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (id, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        send(*id, gi, grads);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_param_leaves_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(&[2.0, 3.0]));
        let g = {
            let mut graph = Graph::new(&store);
            let a = graph.param(w);
            let b = graph.param(w);
            let s = graph.add(a, b).unwrap();
            let out = graph.sum(s).unwrap();
            let grads = graph.backward(out).unwrap();
            let mut sink = vec![None];
            grads.accumulate_into(&mut sink);
            sink[0].take().unwrap()
        };
        assert_eq!(g.data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut graph = Graph::new(&store);
        let x = graph.input_with_grad(Tensor::vector(&[1.0, 2.0]));
        assert!(graph.backward(x).is_err());
    }

    #[test]
    fn constant_inputs_receive_no_gradient() {
        let store = ParamStore::new();
        let mut graph = Graph::new(&store);
        let x = graph.input(Tensor::vector(&[1.0, -2.0]));
        let r = graph.relu(x).unwrap();
        let s = graph.sum(r).unwrap();
        let grads = graph.backward(s).unwrap();
        assert!(grads.node(x).is_none());
    }
}
