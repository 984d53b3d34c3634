//! Reverse-mode differentiation over a recorded tape of layer operations.
//!
//! The tape is single-writer: one training step records its forward pass and
//! then calls [`GradientTape::backward`]. Nodes reference earlier nodes only,
//! so tape order is already a topological order and the backward sweep is a
//! single reverse pass. Nodes whose inputs are all non-differentiable carry
//! `requires_grad = false` and never receive gradient storage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Handle to a node on a [`GradientTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum NodeOp {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: ops::Padding,
    },
    BatchNormInfer {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: NodeId,
        window: usize,
        stride: usize,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Flatten {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        mask: Option<Vec<f64>>,
    },
    Softmax {
        input: NodeId,
    },
    BceLoss {
        predicted: NodeId,
        target: Tensor,
    },
}

struct Node {
    op: NodeOp,
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
}

/// Ordered record of executed operations plus per-node values.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape::default()
    }

    fn push(&mut self, op: NodeOp, value: Tensor, requires_grad: bool, name: Option<String>) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad, name });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records a constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeOp::Leaf, value, false, None)
    }

    /// Records a named trainable parameter.
    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(NodeOp::Leaf, value, true, Some(name.into()))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: ops::Padding,
    ) -> Result<NodeId> {
        let value = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.requires(input)
            || self.requires(kernel)
            || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(NodeOp::Conv2d { input, kernel, bias, stride, padding }, value, rg, None))
    }

    pub fn batchnorm_infer(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let value = ops::batchnorm_infer(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            self.value(mean),
            self.value(var),
            eps,
        )?;
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(NodeOp::BatchNormInfer { input, gamma, beta, mean, var, eps }, value, rg, None))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let rg = self.requires(input);
        self.push(NodeOp::Relu { input }, value, rg, None)
    }

    pub fn max_pool2d(
        &mut self,
        input: NodeId,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (value, argmax) = ops::max_pool2d_padded(self.value(input), window, stride, padding)?;
        let rg = self.requires(input);
        Ok(self.push(NodeOp::MaxPool2d { input, argmax }, value, rg, None))
    }

    pub fn avg_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let value = ops::avg_pool2d(self.value(input), window, stride)?;
        let rg = self.requires(input);
        Ok(self.push(NodeOp::AvgPool2d { input, window, stride }, value, rg, None))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::global_avg_pool(self.value(input))?;
        let rg = self.requires(input);
        Ok(self.push(NodeOp::GlobalAvgPool { input }, value, rg, None))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
        let value = ops::concat_channels(&tensors)?;
        let rg = inputs.iter().any(|id| self.requires(*id));
        Ok(self.push(NodeOp::Concat { inputs: inputs.to_vec() }, value, rg, None))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = ops::add(self.value(lhs), self.value(rhs))?;
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(NodeOp::Add { lhs, rhs }, value, rg, None))
    }

    pub fn dense_affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::dense_affine(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(NodeOp::Dense { input, weight, bias }, value, rg, None))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::flatten(self.value(input))?;
        let rg = self.requires(input);
        Ok(self.push(NodeOp::Flatten { input }, value, rg, None))
    }

    pub fn dropout(
        &mut self,
        input: NodeId,
        rate: f64,
        mode: ops::DropoutMode,
        seed: u64,
    ) -> Result<NodeId> {
        let mask = ops::dropout_mask(self.value(input).len(), rate, mode, seed)?;
        let value = match &mask {
            None => self.value(input).clone(),
            Some(mask) => {
                let mut out = self.value(input).clone();
                for (v, m) in out.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                out
            }
        };
        let rg = self.requires(input);
        Ok(self.push(NodeOp::Dropout { input, mask }, value, rg, None))
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::softmax(self.value(input))?;
        let rg = self.requires(input);
        Ok(self.push(NodeOp::Softmax { input }, value, rg, None))
    }

    pub fn bce_loss(&mut self, predicted: NodeId, target: Tensor) -> Result<NodeId> {
        let loss = ops::bce_loss(self.value(predicted), &target)?;
        let rg = self.requires(predicted);
        Ok(self.push(NodeOp::BceLoss { predicted, target }, Tensor::scalar(loss), rg, None))
    }

    /// Accumulates `amount` into the gradient slot for `id`, allocating on
    /// first use. Slots exist only for nodes with `requires_grad`.
    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, amount: Tensor) {
        if !self.requires(id) {
            return;
        }
        debug_assert_eq!(amount.shape(), self.nodes[id.0].value.shape());
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(amount.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(amount),
        }
    }

    /// Runs the reverse sweep from a scalar loss node and returns gradients
    /// for every named trainable parameter reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires(loss) {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                NodeOp::Leaf => {
                    grads[idx] = Some(grad);
                }
                NodeOp::Conv2d { input, kernel, bias, stride, padding } => {
                    let need_input = self.requires(*input);
                    let (d_in, d_k, d_b) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &grad,
                        *stride,
                        *padding,
                        need_input,
                    )?;
                    if let Some(d_in) = d_in {
                        self.accumulate(&mut grads, *input, d_in);
                    }
                    self.accumulate(&mut grads, *kernel, d_k);
                    if let Some(bias) = bias {
                        self.accumulate(&mut grads, *bias, d_b);
                    }
                }
                NodeOp::BatchNormInfer { input, gamma, beta, mean, var, eps } => {
                    let (d_in, d_gamma, d_beta) = ops::batchnorm_infer_backward(
                        self.value(*input),
                        self.value(*gamma),
                        self.value(*mean),
                        self.value(*var),
                        *eps,
                        &grad,
                    )?;
                    self.accumulate(&mut grads, *input, d_in);
                    self.accumulate(&mut grads, *gamma, d_gamma);
                    self.accumulate(&mut grads, *beta, d_beta);
                }
                NodeOp::Relu { input } => {
                    let d = ops::relu_backward(self.value(*input), &grad);
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::MaxPool2d { input, argmax } => {
                    let d = ops::max_pool2d_backward(self.value(*input).shape(), argmax, &grad);
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::AvgPool2d { input, window, stride } => {
                    let d = ops::avg_pool2d_backward(
                        self.value(*input).shape(),
                        *window,
                        *stride,
                        &grad,
                    );
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::GlobalAvgPool { input } => {
                    let d = ops::global_avg_pool_backward(self.value(*input).shape(), &grad);
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::Concat { inputs } => {
                    let shapes: Vec<Vec<usize>> =
                        inputs.iter().map(|id| self.value(*id).shape().to_vec()).collect();
                    let pieces = ops::concat_channels_backward(&shapes, &grad);
                    for (id, piece) in inputs.iter().zip(pieces) {
                        self.accumulate(&mut grads, *id, piece);
                    }
                }
                NodeOp::Add { lhs, rhs } => {
                    self.accumulate(&mut grads, *lhs, grad.clone());
                    self.accumulate(&mut grads, *rhs, grad);
                }
                NodeOp::Dense { input, weight, bias } => {
                    let (d_in, d_w, d_b) =
                        ops::dense_affine_backward(self.value(*input), self.value(*weight), &grad);
                    self.accumulate(&mut grads, *input, d_in);
                    self.accumulate(&mut grads, *weight, d_w);
                    self.accumulate(&mut grads, *bias, d_b);
                }
                NodeOp::Flatten { input } => {
                    let d = grad.reshape(self.value(*input).shape().to_vec())?;
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::Dropout { input, mask } => {
                    let d = match mask {
                        None => grad,
                        Some(mask) => {
                            let mut d = grad;
                            for (v, m) in d.data_mut().iter_mut().zip(mask) {
                                *v *= m;
                            }
                            d
                        }
                    };
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::Softmax { input } => {
                    let d = ops::softmax_backward(&node.value, &grad);
                    self.accumulate(&mut grads, *input, d);
                }
                NodeOp::BceLoss { predicted, target } => {
                    let scale = grad.item()?;
                    let mut d = ops::bce_loss_backward(self.value(*predicted), target)?;
                    if scale != 1.0 {
                        for v in d.data_mut() {
                            *v *= scale;
                        }
                    }
                    self.accumulate(&mut grads, *predicted, d);
                }
            }
        }

        let mut named = BTreeMap::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(name), Some(grad), NodeOp::Leaf) = (&node.name, grad, &node.op) {
                if node.requires_grad {
                    named.insert(name.clone(), grad);
                }
            }
        }
        Ok(named)
    }
}
