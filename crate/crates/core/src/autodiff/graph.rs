use super::primitive::{forward, vjp, Primitive};
use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Tensor<S>,
    op: Option<Primitive>,
    parents: Vec<NodeId>,
}

/// Tape of tensor operations supporting one reverse sweep.
///
/// Nodes are appended after their parents, so creation order is a topological
/// order and the backward sweep simply walks the tape in reverse.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor (parameter or constant) to the tape.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            op: None,
            parents: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: S) -> NodeId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].grad
    }

    /// Records `op` applied to `inputs` and evaluates it.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        let value = {
            let values: Vec<&Tensor<S>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            forward(op, &values)?
        };
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue(op.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            op: Some(op),
            parents: inputs.to_vec(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Like [`Graph::apply`] but resolves the primitive by name.
    pub fn apply_named(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let op: Primitive = name.parse()?;
        self.apply(op, inputs)
    }

    /// Accumulates `∂root/∂node` into every node reachable from `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if !self.nodes[root.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        self.backward_done = true;
        self.nodes[root.0].grad.data_mut()[0] = S::one();

        for idx in (0..=root.0).rev() {
            let Some(op) = self.nodes[idx].op else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.grad.data().iter().all(|g| g.is_zero()) {
                continue;
            }
            let parent_grads = {
                let inputs: Vec<&Tensor<S>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                vjp(op, &inputs, &node.value, &node.grad)
            };
            let parents = self.nodes[idx].parents.clone();
            for (parent, g) in parents.into_iter().zip(parent_grads) {
                self.nodes[parent.0].grad.add_assign(&g);
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::Subtract, &[a, b])
    }

    /// `factor * x` with a constant factor.
    pub fn scale(&mut self, factor: S, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.scalar(factor);
        self.apply(Primitive::ScalarMultiply, &[s, x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn mean_over_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::MeanOverAxis(axis), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::L2NormEps, &[x])
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::L2NormalizeEps, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::SoftmaxLog, &[x])
    }

    pub fn hinge(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::HingeMax0, &[x])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.apply(Primitive::Dot, &[a, b])
    }

    /// Sums one-element nodes left to right; `None` for an empty list.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<Option<NodeId>, AutodiffError> {
        let mut iter = terms.iter().copied();
        let Some(mut acc) = iter.next() else {
            return Ok(None);
        };
        for t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }
}
