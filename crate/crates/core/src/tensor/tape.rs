use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    MulConst {
        x: Var,
        factors: Vec<T>,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
        /// false where the output was clamped (zero local derivative)
        live: Vec<bool>,
    },
    Concat {
        parts: Vec<Var>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    BagMean {
        table: Var,
        /// (output row, table row, weight), grouped by output row in id order
        terms: Vec<(usize, usize, T)>,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
        axes: (usize, usize),
    },
    Sum {
        x: Var,
    },
    BinaryCrossEntropy {
        p: Var,
        labels: Vec<T>,
    },
}

pub(super) struct Node<'p, T: Float> {
    pub(super) value: Cow<'p, Tensor<T>>,
    pub(super) op: Op<T>,
    pub(super) needs_grad: bool,
    pub(super) name: Option<String>,
}

/// Records primitive operations in execution order so that [`Tape::backward`]
/// can replay them in reverse. Parameters can be borrowed for the lifetime
/// `'p` to avoid copying weights on every forward.
pub struct Tape<'p, T: Float = f32> {
    pub(super) nodes: Vec<Node<'p, T>>,
    consumed: bool,
}

impl<T: Float> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A named leaf that receives a gradient, borrowed from the caller.
    pub fn param(&mut self, name: &str, value: &'p Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), Some(name.to_string()))
    }

    /// A named leaf that receives a gradient, owned by the tape.
    pub fn param_owned(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), Some(name.to_string()))
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), None)
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor<T>>, name: Option<String>) -> Var {
        let needs_grad = name.is_some();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Reverse accumulation from a scalar loss. Every named leaf gets a
    /// gradient of its own shape, zero if it did not influence the loss.
    /// A tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already replayed; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        let mut by_name = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients { by_name })
    }

    /// Adds `delta` into the gradient slot of `v` if `v` participates in
    /// differentiation.
    pub(super) fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        delta: impl FnOnce() -> Tensor<T>,
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let d = delta();
        debug_assert_eq!(d.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }
}

/// Gradients of a scalar loss keyed by leaf name.
#[derive(Clone, Debug)]
pub struct Gradients<T: Float = f32> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }

    /// L2 norm over every gradient value.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_name.values_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}
