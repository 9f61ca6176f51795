//! Tape-based reverse-mode differentiation over a static graph.
//!
//! A [`Graph`] is an append-only list of nodes; every node's inputs are
//! earlier nodes, so insertion order is a topological order. [`Graph::forward`]
//! evaluates every node once and caches what each backward rule needs in a
//! [`Tape`]. [`Graph::backward`] seeds the scalar output with a gradient and
//! sweeps the tape in reverse, accumulating gradients for every node and
//! every parameter.
//!
//! Activation nodes carry an [`ActivationRule`]; their backward factor is
//! picked from the cached forward input, never from a re-evaluated proxy
//! network.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{self, ActivationRule, BatchNormCache, BatchNormSpec, Conv2dSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { name: String },
    Conv2d { kernel: ParamId, bias: Option<ParamId>, spec: Conv2dSpec },
    /// `bn` indexes [`Graph::batchnorm_spec`].
    BatchNorm { gamma: ParamId, beta: ParamId, bn: usize },
    Activation { rule: ActivationRule },
    Dense { weight: ParamId, bias: Option<ParamId> },
    MaxPool2d { size: usize, stride: usize },
    GlobalAvgPool,
    /// `(N, ...) -> (N, rest)`.
    Flatten,
    Reshape { shape: Vec<usize> },
    Add,
    Mul,
    Scale { factor: f64 },
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// One element by flat offset, shape `[1]`.
    Select { offset: usize },
    /// Mean softmax cross-entropy against the bound labels.
    CrossEntropy,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Activation { .. } => "activation",
            Op::Dense { .. } => "dense",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::Reshape { .. } => "reshape",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum => "sum",
            Op::Select { .. } => "select",
            Op::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters still receive gradients but optimizers skip them.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Param>,
    batchnorms: Vec<BatchNormSpec>,
    output: Option<NodeId>,
}

/// Values bound to the graph's input placeholders.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    pub tensors: BTreeMap<String, Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: Tensor) -> Self {
        self.tensors.insert(name.to_string(), value);
        self
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.labels = Some(labels);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cache {
    None,
    BatchNorm(BatchNormCache),
    MaxPool(Vec<usize>),
    Labels(Vec<usize>),
}

/// Forward activations and per-node caches of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    values: Vec<Tensor>,
    caches: Vec<Cache>,
    output: NodeId,
}

impl Tape {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn cache(&self, node: NodeId) -> &Cache {
        &self.caches[node.0]
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    /// Scalar output value, if the output node holds exactly one element.
    pub fn output(&self) -> Option<f64> {
        self.values[self.output.0].item()
    }

    /// Sign of every activation input and every max-pool winner; two tapes
    /// with equal patterns lie on the same linear piece of the network.
    pub fn branch_pattern(&self, graph: &Graph) -> Vec<usize> {
        let mut pattern = Vec::new();
        for (i, node) in graph.nodes.iter().enumerate() {
            match &node.op {
                Op::Activation { .. } => pattern.extend(
                    self.values[node.inputs[0].0]
                        .data()
                        .iter()
                        .map(|&v| usize::from(v < 0.0)),
                ),
                Op::MaxPool2d { .. } => {
                    if let Cache::MaxPool(arg) = &self.caches[i] {
                        pattern.extend_from_slice(arg);
                    }
                }
                _ => {}
            }
        }
        pattern
    }
}

/// Gradients of the seeded output with respect to every node and parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
    input_index: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient at a node's output; zeros are reported as `None` only when
    /// no path from the output reaches the node.
    pub fn node(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.input_index.get(name).and_then(|&id| self.node(id))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(grad),
        Some(existing) => {
            existing.expect_shape(grad.shape())?;
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs,
            label: None,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.output = Some(id);
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
        )
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn frozen_param(&mut self, name: &str, value: Tensor) -> ParamId {
        let id = self.param(name, value);
        self.params[id.0].trainable = false;
        id
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: ParamId,
        bias: Option<ParamId>,
        spec: Conv2dSpec,
    ) -> NodeId {
        self.push(Op::Conv2d { kernel, bias, spec }, vec![x])
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        spec: BatchNormSpec,
    ) -> NodeId {
        self.batchnorms.push(spec);
        let bn = self.batchnorms.len() - 1;
        self.push(Op::BatchNorm { gamma, beta, bn }, vec![x])
    }

    pub fn activation(&mut self, x: NodeId, rule: ActivationRule) -> NodeId {
        self.push(Op::Activation { rule }, vec![x])
    }

    pub fn dense(&mut self, x: NodeId, weight: ParamId, bias: Option<ParamId>) -> NodeId {
        self.push(Op::Dense { weight, bias }, vec![x])
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize, stride: usize) -> NodeId {
        self.push(Op::MaxPool2d { size, stride }, vec![x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Flatten, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![x],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { factor }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn select(&mut self, x: NodeId, offset: usize) -> NodeId {
        self.push(Op::Select { offset }, vec![x])
    }

    pub fn cross_entropy(&mut self, logits: NodeId) -> NodeId {
        self.push(Op::CrossEntropy, vec![logits])
    }

    pub fn set_label(&mut self, node: NodeId, label: &str) {
        self.nodes[node.0].label = Some(label.to_string());
    }

    /// Designates the node seeded by [`Graph::backward`]. Defaults to the last node added.
    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn find(&self, label: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.label.as_deref() == Some(label))
            .map(NodeId)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters, trainable or not.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn batchnorm_spec(&self, bn: usize) -> &BatchNormSpec {
        &self.batchnorms[bn]
    }

    /// Every batch-norm node, in graph order.
    pub fn batchnorm_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::BatchNorm { .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Replaces the rule of every activation node.
    pub fn set_activation_rule(&mut self, rule: ActivationRule) {
        for node in &mut self.nodes {
            if let Op::Activation { rule: r } = &mut node.op {
                *r = rule;
            }
        }
    }

    pub fn with_activation_rule(&self, rule: ActivationRule) -> Self {
        let mut g = self.clone();
        g.set_activation_rule(rule);
        g
    }

    /// Folds the batch statistics recorded on `tape` into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape) -> Result<()> {
        self.check_tape(tape)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::BatchNorm { bn, .. }, Cache::BatchNorm(cache)) = (&node.op, &tape.caches[i]) {
                if cache.training {
                    self.batchnorms[*bn].update_running(cache);
                }
            }
        }
        Ok(())
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.values.len() != self.nodes.len() {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }

    /// Evaluates every node without requiring a scalar output.
    pub fn evaluate(&self, bindings: &Bindings, mode: Mode) -> Result<Tape> {
        let output = self
            .output
            .ok_or_else(|| Error::InvalidArgument("graph has no nodes".into()))?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let arg = |k: usize| &values[node.inputs[k].0];
            let mut cache = Cache::None;
            let value = match &node.op {
                Op::Input { name } => bindings
                    .tensors
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Op::Conv2d { kernel, bias, spec } => layers::conv2d_forward(
                    arg(0),
                    self.param_value(*kernel),
                    bias.map(|b| self.param_value(b)),
                    *spec,
                )?,
                Op::BatchNorm { gamma, beta, bn } => {
                    let (y, c) = layers::batchnorm_forward(
                        arg(0),
                        self.param_value(*gamma),
                        self.param_value(*beta),
                        &self.batchnorms[*bn],
                        mode == Mode::Train,
                    )?;
                    cache = Cache::BatchNorm(c);
                    y
                }
                Op::Activation { rule } => layers::activation_forward(arg(0), *rule),
                Op::Dense { weight, bias } => layers::dense_forward(
                    arg(0),
                    self.param_value(*weight),
                    bias.map(|b| self.param_value(b)),
                )?,
                Op::MaxPool2d { size, stride } => {
                    let (y, a) = layers::maxpool2d_forward(arg(0), *size, *stride)?;
                    cache = Cache::MaxPool(a);
                    y
                }
                Op::GlobalAvgPool => layers::global_avg_pool_forward(arg(0))?,
                Op::Flatten => {
                    let x = arg(0);
                    let n = x.shape()[0];
                    x.clone().reshape(&[n, x.len() / n])?
                }
                Op::Reshape { shape } => arg(0).clone().reshape(shape)?,
                Op::Add => arg(0).add(arg(1))?,
                Op::Mul => arg(0).mul(arg(1))?,
                Op::Scale { factor } => arg(0).scale(*factor)?,
                Op::Sum => Tensor::scalar(arg(0).sum()),
                Op::Select { offset } => {
                    let x = arg(0);
                    let v = x.data().get(*offset).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "select offset {offset} outside tensor of {} elements",
                            x.len()
                        ))
                    })?;
                    Tensor::scalar(v)
                }
                Op::CrossEntropy => {
                    let labels = bindings
                        .labels
                        .clone()
                        .ok_or_else(|| Error::UnboundInput("labels".into()))?;
                    let l = layers::softmax_cross_entropy(arg(0), &labels)?;
                    cache = Cache::Labels(labels);
                    Tensor::scalar(l)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(
                    node.label.clone().unwrap_or_else(|| node.op.name().to_string()),
                ));
            }
            values.push(value);
            caches.push(cache);
        }
        Ok(Tape {
            values,
            caches,
            output,
        })
    }

    /// Evaluates the graph and returns its scalar output together with the tape.
    pub fn forward(&self, bindings: &Bindings, mode: Mode) -> Result<(f64, Tape)> {
        let tape = self.evaluate(bindings, mode)?;
        let out = tape.value(tape.output);
        let v = out
            .item()
            .ok_or_else(|| Error::NonScalarOutput(out.shape().to_vec()))?;
        Ok((v, tape))
    }

    /// Reverse sweep seeded with `seed` at the output node.
    pub fn backward(&self, tape: &Tape, seed: f64) -> Result<Gradients> {
        self.check_tape(tape)?;
        let out = tape.output;
        let out_val = tape.value(out);
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        grads[out.0] = Some(Tensor::full(out_val.shape(), seed)?);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let x = |k: usize| tape.value(node.inputs[k]);
            let to_input = |k: usize, grad: Tensor, grads: &mut Vec<Option<Tensor>>| {
                accumulate(&mut grads[node.inputs[k].0], grad)
            };
            match &node.op {
                Op::Input { .. } => {}
                Op::Conv2d { kernel, bias, spec } => {
                    let cg = layers::conv2d_backward(
                        x(0),
                        self.param_value(*kernel),
                        &g,
                        bias.is_some(),
                        *spec,
                    )?;
                    to_input(0, cg.input, &mut grads)?;
                    accumulate(&mut pgrads[kernel.0], cg.kernel)?;
                    if let (Some(b), Some(db)) = (bias, cg.bias) {
                        accumulate(&mut pgrads[b.0], db)?;
                    }
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let Cache::BatchNorm(cache) = &tape.caches[i] else {
                        return Err(Error::TapeMismatch);
                    };
                    let bg = layers::batchnorm_backward(cache, self.param_value(*gamma), &g)?;
                    to_input(0, bg.input, &mut grads)?;
                    accumulate(&mut pgrads[gamma.0], bg.gamma)?;
                    accumulate(&mut pgrads[beta.0], bg.beta)?;
                }
                Op::Activation { rule } => {
                    to_input(0, layers::activation_backward(x(0), &g, *rule)?, &mut grads)?;
                }
                Op::Dense { weight, bias } => {
                    let dg = layers::dense_backward(
                        x(0),
                        self.param_value(*weight),
                        &g,
                        bias.is_some(),
                    )?;
                    to_input(0, dg.input, &mut grads)?;
                    accumulate(&mut pgrads[weight.0], dg.weight)?;
                    if let (Some(b), Some(db)) = (bias, dg.bias) {
                        accumulate(&mut pgrads[b.0], db)?;
                    }
                }
                Op::MaxPool2d { .. } => {
                    let Cache::MaxPool(arg) = &tape.caches[i] else {
                        return Err(Error::TapeMismatch);
                    };
                    to_input(0, layers::maxpool2d_backward(x(0).shape(), arg, &g)?, &mut grads)?;
                }
                Op::GlobalAvgPool => {
                    to_input(0, layers::global_avg_pool_backward(x(0).shape(), &g)?, &mut grads)?;
                }
                Op::Flatten | Op::Reshape { .. } => {
                    let shape = x(0).shape().to_vec();
                    to_input(0, g.clone().reshape(&shape)?, &mut grads)?;
                }
                Op::Add => {
                    to_input(0, g.clone(), &mut grads)?;
                    to_input(1, g.clone(), &mut grads)?;
                }
                Op::Mul => {
                    let ga = g.mul(x(1))?;
                    let gb = g.mul(x(0))?;
                    to_input(0, ga, &mut grads)?;
                    to_input(1, gb, &mut grads)?;
                }
                Op::Scale { factor } => to_input(0, g.scale(*factor)?, &mut grads)?,
                Op::Sum => {
                    let s = g.data()[0];
                    to_input(0, Tensor::full(x(0).shape(), s)?, &mut grads)?;
                }
                Op::Select { offset } => {
                    let mut z = Tensor::zeros(x(0).shape())?;
                    z.data_mut()[*offset] = g.data()[0];
                    to_input(0, z, &mut grads)?;
                }
                Op::CrossEntropy => {
                    let Cache::Labels(labels) = &tape.caches[i] else {
                        return Err(Error::TapeMismatch);
                    };
                    let d = layers::softmax_cross_entropy_backward(x(0), labels)?;
                    to_input(0, d.scale(g.data()[0])?, &mut grads)?;
                }
            }
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(t) = g {
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {}",
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        let input_index = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Input { name } => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
            input_index,
        })
    }
}

/// What [`finite_difference_grad`] perturbs.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Input(String),
    Param(ParamId),
}

/// Central differences `(f(x + εeᵢ) - f(x - εeᵢ)) / 2ε` using forward passes only.
pub fn finite_difference_grad(
    graph: &Graph,
    bindings: &Bindings,
    target: &Target,
    eps: f64,
    mode: Mode,
) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    match target {
        Target::Input(name) => {
            let base = bindings
                .tensors
                .get(name)
                .ok_or_else(|| Error::UnboundInput(name.clone()))?
                .clone();
            let mut b = bindings.clone();
            let mut out = Tensor::zeros(base.shape())?;
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[i] += eps;
                b.tensors.insert(name.clone(), plus);
                let fp = graph.forward(&b, mode)?.0;
                let mut minus = base.clone();
                minus.data_mut()[i] -= eps;
                b.tensors.insert(name.clone(), minus);
                let fm = graph.forward(&b, mode)?.0;
                out.data_mut()[i] = (fp - fm) / (2.0 * eps);
            }
            Ok(out)
        }
        Target::Param(id) => {
            let mut g = graph.clone();
            let base = graph.param_value(*id).clone();
            let mut out = Tensor::zeros(base.shape())?;
            for i in 0..base.len() {
                g.params[id.0].value.data_mut()[i] = base.data()[i] + eps;
                let fp = g.forward(bindings, mode)?.0;
                g.params[id.0].value.data_mut()[i] = base.data()[i] - eps;
                let fm = g.forward(bindings, mode)?.0;
                g.params[id.0].value.data_mut()[i] = base.data()[i];
                out.data_mut()[i] = (fp - fm) / (2.0 * eps);
            }
            Ok(out)
        }
    }
}
