//! Reverse-mode automatic differentiation over rank-4 feature tensors.
//!
//! A [`Tape`] records every op whose inputs require gradients; [`Tape::backward`]
//! replays it in reverse. Values are reference counted so that recorded ops can
//! keep their operands alive without copying, and so that nothing is retained
//! when recording is disabled (inference).

mod conv;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::NnError;
use crate::tensor::{Float, Tensor};

pub use ops::BatchNormOutput;

/// A value flowing through the graph, optionally attached to a tape node.
#[derive(Clone, Debug)]
pub struct Var<F> {
    node: Option<usize>,
    value: Arc<Tensor<F>>,
}

impl<F: Float> Var<F> {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor<F>) -> Self {
        Self {
            node: None,
            value: Arc::new(value),
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize), NnError> {
        self.value.dims4()
    }

    pub(crate) fn rc(&self) -> Arc<Tensor<F>> {
        Arc::clone(&self.value)
    }
}

/// Recorded operation together with whatever its backward pass needs.
pub(crate) enum Op<F> {
    Leaf,
    Conv2d {
        x: Arc<Tensor<F>>,
        w: Arc<Tensor<F>>,
    },
    ConvTranspose2d {
        x: Arc<Tensor<F>>,
        w: Arc<Tensor<F>>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        in_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    BatchNorm {
        xhat: Tensor<F>,
        gamma: Arc<Tensor<F>>,
        invstd: Vec<F>,
        batch_stats: bool,
    },
    Relu {
        y: Arc<Tensor<F>>,
    },
    Sigmoid {
        y: Arc<Tensor<F>>,
    },
    Tanh {
        y: Arc<Tensor<F>>,
    },
    Add,
    ConcatChannels {
        widths: Vec<usize>,
    },
    NarrowChannels {
        start: usize,
        total: usize,
    },
    NarrowBatch {
        start: usize,
        total: usize,
    },
    LstmPointwise {
        acts: Tensor<F>,
        tanh_c: Tensor<F>,
        c_prev: Option<Arc<Tensor<F>>>,
    },
    TimeShift {
        steps: usize,
        shift: isize,
    },
    Mask {
        mask: Vec<F>,
    },
    SoftmaxCrossEntropy {
        probs: Tensor<F>,
        labels: Vec<u8>,
    },
    WeightedSum {
        weights: Arc<Tensor<F>>,
    },
}

struct Node<F> {
    op: Op<F>,
    inputs: Vec<Option<usize>>,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        var.node.and_then(|n| self.grads[n].as_ref())
    }

    pub fn take(&mut self, var: &Var<F>) -> Option<Tensor<F>> {
        var.node.and_then(|n| self.grads[n].take())
    }
}

/// Operation recorder. With recording disabled ops only compute values.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    recording: bool,
    named_leaves: HashMap<String, Var<F>>,
}

impl<F: Float> Tape<F> {
    pub fn new(recording: bool) -> Self {
        Self {
            nodes: Vec::new(),
            recording,
            named_leaves: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (tracked only while recording).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var<F> {
        self.leaf_rc(Arc::new(value))
    }

    pub(crate) fn leaf_rc(&mut self, value: Arc<Tensor<F>>) -> Var<F> {
        if !self.recording {
            return Var { node: None, value };
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
        });
        Var {
            node: Some(self.nodes.len() - 1),
            value,
        }
    }

    /// Leaf shared by name, so a parameter used at several time steps
    /// accumulates all of its gradient contributions in one place.
    pub(crate) fn named_leaf(
        &mut self,
        name: &str,
        value: impl FnOnce() -> Arc<Tensor<F>>,
        trainable: bool,
    ) -> Var<F> {
        if let Some(v) = self.named_leaves.get(name) {
            return v.clone();
        }
        let v = if trainable {
            self.leaf_rc(value())
        } else {
            Var {
                node: None,
                value: value(),
            }
        };
        self.named_leaves.insert(name.to_string(), v.clone());
        v
    }

    pub(crate) fn named_leaves(&self) -> impl Iterator<Item = (&String, &Var<F>)> {
        self.named_leaves.iter()
    }

    fn wants(&self, inputs: &[Option<&Var<F>>]) -> bool {
        self.recording && inputs.iter().flatten().any(|v| v.node.is_some())
    }

    fn push(&mut self, op: Op<F>, inputs: &[Option<&Var<F>>], value: Tensor<F>) -> Var<F> {
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.and_then(|v| v.node)).collect(),
        });
        Var {
            node: Some(self.nodes.len() - 1),
            value: Arc::new(value),
        }
    }

    fn untracked(value: Tensor<F>) -> Var<F> {
        Var {
            node: None,
            value: Arc::new(value),
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: &Var<F>) -> Result<Gradients<F>, NnError> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root) = output.node else {
            return Ok(Gradients { grads });
        };
        if output.value.len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar output, got shape {:?}",
                output.shape()
            )));
        }
        grads[root] = Some(Tensor::full(output.shape(), F::one()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = ops::backward(&node.op, &g, &needs)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(n), Some(ig)) = (slot, ig) {
                    match &mut grads[*n] {
                        Some(acc) => acc.add_assign(&ig),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests;
