use std::mem;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a recorded node. Nodes are appended in execution order, so
/// ascending ids are a topological order of the graph.
pub type NodeId = usize;

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) output: Tensor,
}

impl Node {
    fn saved_bytes(&self) -> usize {
        (self.output.len() + self.op.saved_len()) * mem::size_of::<f64>()
    }
}

/// Append-only record of differentiable operations.
///
/// Every operation method on the tape computes its result eagerly. A node
/// is appended only while recording is on and at least one input already
/// belongs to the graph; otherwise the result is a constant.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Runs `f` with recording off, restoring the previous state afterwards.
    pub fn without_recording<R>(&mut self, f: impl FnOnce(&mut Tape) -> R) -> R {
        let prev = mem::replace(&mut self.recording, false);
        let out = f(self);
        self.recording = prev;
        out
    }

    /// Registers `value` as a differentiable input (a trainable parameter).
    /// While recording is off the value comes back as a constant.
    pub fn leaf(&mut self, value: &Tensor) -> Tensor {
        let value = value.detach();
        if !self.recording {
            return value;
        }
        self.push(Op::Leaf, Vec::new(), value)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded activations: every non-leaf node output plus
    /// the auxiliary buffers operations keep for their backward pass.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(Node::saved_bytes)
            .sum()
    }

    pub(crate) fn should_record(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.node.is_some())
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<Tensor>, output: Tensor) -> Tensor {
        let id = self.nodes.len();
        let output = output.detach();
        self.nodes.push(Node {
            op,
            inputs,
            output: output.clone(),
        });
        output.with_node(id)
    }

    /// Records `op` if any input is in the graph, else returns `output` as a constant.
    pub(crate) fn record(&mut self, op: Op, inputs: &[&Tensor], output: Tensor) -> Tensor {
        if self.should_record(inputs) {
            let inputs = inputs.iter().map(|t| (*t).clone()).collect();
            self.push(op, inputs, output)
        } else {
            output
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients are produced for exactly the recorded ancestors of `loss`.
    /// The tape itself is not modified, so repeated calls agree.
    pub fn backward(&self, loss: &Tensor) -> Result<Grads> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node()
            .filter(|&id| id < self.nodes.len())
            .ok_or_else(|| Error::Contract("loss is not recorded on this tape".into()))?;

        let mut acc: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        acc[root] = Some(vec![1.0]);
        let mut layer_backward_count = 0;

        for id in (0..=root).rev() {
            let Some(gout) = acc[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::LayerMark) {
                layer_backward_count += 1;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|t| t.node.is_some()).collect();
            if needs.iter().any(|&n| n) {
                let input_grads = node.op.backward(&node.inputs, &node.output, &gout, &needs);
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let (Some(src), Some(g)) = (input.node, g) else { continue };
                    match &mut acc[src] {
                        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            acc[id] = Some(gout);
        }

        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::from_parts(self.nodes[id].output.shape().to_vec(), g)))
            .collect();
        let leaves = self.nodes[..=root]
            .iter()
            .map(|n| matches!(n.op, Op::Leaf))
            .collect();
        Ok(Grads {
            grads,
            leaves,
            layer_backward_count,
        })
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<bool>,
    layer_backward_count: usize,
}

impl Grads {
    /// Gradient of the loss w.r.t. `t`, if `t` is a recorded ancestor of it.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        t.node().and_then(|id| self.by_id(id))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Every node that received a gradient.
    pub fn keys(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|_| i))
    }

    /// Leaves (parameters) that received a gradient.
    pub fn leaf_keys(&self) -> Vec<NodeId> {
        self.keys().filter(|&i| self.leaves[i]).collect()
    }

    /// Number of layer boundaries the sweep passed through.
    pub fn layer_backward_count(&self) -> usize {
        self.layer_backward_count
    }
}
