//! A small layer DAG with cached activations and reverse-mode gradients.
//!
//! Nodes can only reference nodes created before them, so insertion order is
//! a topological order and the graph is acyclic by construction.

use crate::error::{Error, Result};
use crate::tensor::{self, BatchNormCache, Mode, Scalar, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input {
        slot: usize,
    },
    Conv3x3 {
        weight: ParamId,
        bias: ParamId,
    },
    MaxPool2,
    Upsample2,
    Relu,
    BatchNorm {
        scale: ParamId,
        shift: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Concat,
    SoftmaxChannels,
}

#[derive(Clone, Debug)]
pub struct LayerNode {
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

/// A named tensor owned by the graph together with its gradient slot.
/// Non-trainable parameters (batchnorm running statistics) are persisted but
/// never updated by an optimizer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Argmax(Vec<usize>),
    BatchNorm(BatchNormCache<T>),
}

#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<LayerNode>,
    params: Vec<Param<T>>,
    output: Option<NodeId>,
    num_inputs: usize,
    activations: Vec<Option<Tensor<T>>>,
    caches: Vec<Cache<T>>,
    forward_done: bool,
    flip_conv_weight_grad: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            output: None,
            num_inputs: 0,
            activations: Vec::new(),
            caches: Vec::new(),
            forward_done: false,
            flip_conv_weight_grad: false,
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        self.params.len() - 1
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        assert!(
            inputs.iter().all(|&i| i < id),
            "node inputs must refer to existing nodes"
        );
        self.nodes.push(LayerNode { kind, inputs });
        self.output = Some(id);
        self.forward_done = false;
        id
    }

    pub fn input(&mut self) -> NodeId {
        let slot = self.num_inputs;
        self.num_inputs += 1;
        self.push(LayerKind::Input { slot }, vec![])
    }

    pub fn conv3x3(&mut self, x: NodeId, weight: ParamId, bias: ParamId) -> NodeId {
        self.push(LayerKind::Conv3x3 { weight, bias }, vec![x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        self.push(LayerKind::MaxPool2, vec![x])
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        self.push(LayerKind::Upsample2, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(LayerKind::Relu, vec![x])
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        scale: ParamId,
        shift: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> NodeId {
        self.push(
            LayerKind::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            },
            vec![x],
        )
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(LayerKind::Concat, vec![a, b])
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> NodeId {
        self.push(LayerKind::SoftmaxChannels, vec![x])
    }

    /// Marks the single output node. Defaults to the most recently added node.
    pub fn set_output(&mut self, node: NodeId) {
        assert!(node < self.nodes.len());
        self.output = Some(node);
    }

    pub fn output(&self) -> NodeId {
        self.output.expect("graph has no nodes")
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn activation(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.activations.get(node).and_then(|a| a.as_ref())
    }

    /// Negative-control hook for gradient checking: flips the sign of every
    /// convolution weight gradient produced by [`Graph::backward_from`].
    #[doc(hidden)]
    pub fn corrupt_conv_backward(&mut self, enabled: bool) {
        self.flip_conv_weight_grad = enabled;
    }

    /// Same topology and parameter values in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            output: self.output,
            num_inputs: self.num_inputs,
            activations: Vec::new(),
            caches: Vec::new(),
            forward_done: false,
            flip_conv_weight_grad: self.flip_conv_weight_grad,
        }
    }

    /// Evaluates every node up to the output, caching activations for backward.
    pub fn forward(&mut self, inputs: &[Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        if inputs.len() != self.num_inputs {
            return Err(Error::Shape(format!(
                "graph takes {} inputs, got {}",
                self.num_inputs,
                inputs.len()
            )));
        }
        let out_id = self.output();
        let mut acts: Vec<Option<Tensor<T>>> = Vec::with_capacity(out_id + 1);
        let mut caches = Vec::with_capacity(out_id + 1);
        for id in 0..=out_id {
            let node = &self.nodes[id];
            let arg = |k: usize| acts[node.inputs[k]].as_ref().expect("topological order");
            let (value, cache) = match &node.kind {
                LayerKind::Input { slot } => (inputs[*slot].clone(), Cache::None),
                LayerKind::Conv3x3 { weight, bias } => (
                    tensor::conv3x3(arg(0), &self.params[*weight].value, &self.params[*bias].value)?,
                    Cache::None,
                ),
                LayerKind::MaxPool2 => {
                    let (y, idx) = tensor::maxpool2(arg(0))?;
                    (y, Cache::Argmax(idx))
                }
                LayerKind::Upsample2 => (tensor::upsample2(arg(0)), Cache::None),
                LayerKind::Relu => (tensor::relu(arg(0)), Cache::None),
                LayerKind::BatchNorm {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    let mut rm = self.params[*running_mean].value.clone();
                    let mut rv = self.params[*running_var].value.clone();
                    let (y, c) = tensor::batchnorm(
                        arg(0),
                        &self.params[*scale].value,
                        &self.params[*shift].value,
                        &mut rm,
                        &mut rv,
                        mode,
                    )?;
                    self.params[*running_mean].value = rm;
                    self.params[*running_var].value = rv;
                    (y, Cache::BatchNorm(c))
                }
                LayerKind::Concat => (tensor::concat(arg(0), arg(1))?, Cache::None),
                LayerKind::SoftmaxChannels => (tensor::softmax_channels(arg(0)), Cache::None),
            };
            acts.push(Some(value));
            caches.push(cache);
        }
        self.activations = acts;
        self.caches = caches;
        self.forward_done = true;
        Ok(self.activations[out_id].clone().expect("output computed"))
    }

    /// Backpropagates `upstream` (gradient of the loss with respect to the
    /// output node). Parameter gradients are overwritten; input gradients are
    /// returned in input-slot order.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.backward_from(self.output(), upstream)
    }

    /// Backpropagates from an arbitrary node, e.g. the logits feeding the final
    /// softmax when the loss supplies its gradient with respect to them.
    pub fn backward_from(&mut self, start: NodeId, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if !self.forward_done || start >= self.activations.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let start_shape = self.activations[start].as_ref().expect("cached").shape();
        if upstream.shape() != start_shape {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match node output {:?}",
                upstream.shape(),
                start_shape
            )));
        }
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; start + 1];
        grads[start] = Some(upstream.clone());
        let mut input_grads: Vec<Option<Tensor<T>>> = vec![None; self.num_inputs];

        for id in (0..=start).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let act = |k: usize| self.activations[node.inputs[k]].as_ref().expect("cached");
            let mut routed: Vec<(NodeId, Tensor<T>)> = Vec::with_capacity(2);
            match &node.kind {
                LayerKind::Input { slot } => {
                    input_grads[*slot] = Some(g);
                }
                LayerKind::Conv3x3 { weight, bias } => {
                    let cg = tensor::conv3x3_backward(act(0), &self.params[*weight].value, &g)?;
                    let mut dw = cg.weight;
                    if self.flip_conv_weight_grad {
                        dw = dw.map(|v| -v);
                    }
                    self.params[*weight].grad.add_assign(&dw);
                    self.params[*bias].grad.add_assign(&cg.bias);
                    routed.push((node.inputs[0], cg.input));
                }
                LayerKind::MaxPool2 => {
                    let Cache::Argmax(idx) = &self.caches[id] else {
                        unreachable!("maxpool cache")
                    };
                    routed.push((node.inputs[0], tensor::maxpool2_backward(&g, idx, act(0).shape())));
                }
                LayerKind::Upsample2 => routed.push((node.inputs[0], tensor::upsample2_backward(&g))),
                LayerKind::Relu => routed.push((node.inputs[0], tensor::relu_backward(act(0), &g))),
                LayerKind::BatchNorm { scale, shift, .. } => {
                    let Cache::BatchNorm(cache) = &self.caches[id] else {
                        unreachable!("batchnorm cache")
                    };
                    let bg = tensor::batchnorm_backward(cache, &self.params[*scale].value, &g);
                    self.params[*scale].grad.add_assign(&bg.scale);
                    self.params[*shift].grad.add_assign(&bg.shift);
                    routed.push((node.inputs[0], bg.input));
                }
                LayerKind::Concat => {
                    let (ga, gb) = tensor::concat_backward(&g, act(0).shape()[1]);
                    routed.push((node.inputs[0], ga));
                    routed.push((node.inputs[1], gb));
                }
                LayerKind::SoftmaxChannels => {
                    let y = self.activations[id].as_ref().expect("cached");
                    routed.push((node.inputs[0], tensor::softmax_channels_backward(y, &g)));
                }
            }
            for (target, gt) in routed {
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&gt),
                    slot @ None => *slot = Some(gt),
                }
            }
        }

        Ok(input_grads
            .into_iter()
            .enumerate()
            .map(|(slot, g)| {
                g.unwrap_or_else(|| {
                    let node = self
                        .nodes
                        .iter()
                        .position(|n| n.kind == LayerKind::Input { slot })
                        .expect("input node");
                    Tensor::zeros(self.activations[node].as_ref().expect("cached").shape())
                })
            })
            .collect())
    }
}
