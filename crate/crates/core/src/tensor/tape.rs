use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
///
/// `backward` receives the gradient of the loss with respect to the
/// operation's output and must add its contribution to each input through
/// the [`GradSink`]. Inputs that do not require a gradient yield `None`
/// from [`GradSink::slot`] and can be skipped.
pub trait Function {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    fn backward(&self, tape: &TapeValues<'_>, output: &Tensor, grad_output: &[f64], sink: &mut GradSink<'_>);
}

struct Node {
    value: Tensor,
    func: Option<Box<dyn Function>>,
}

/// Read-only view of recorded values, handed to backward rules.
pub struct TapeValues<'a> {
    nodes: &'a [Node],
}

impl TapeValues<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

/// Gradient accumulator for the inputs of one backward rule.
pub struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    /// Mutable gradient buffer of `v`, zero-initialized on first access, or
    /// `None` when `v` does not take part in differentiation.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.value.requires_grad() {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(slot) = self.slot(v) {
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag is kept; any
    /// gradient it carries is not copied.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.zero_grad();
        self.push(tensor, None)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records the output of an operation. The output requires a gradient
    /// iff any input does.
    pub fn record(&mut self, value: Tensor, func: Box<dyn Function>) -> Var {
        let requires_grad = func.inputs().iter().any(|v| self.requires_grad(*v));
        self.push(value.with_requires_grad(requires_grad), Some(func))
    }

    fn push(&mut self, value: Tensor, func: Option<Box<dyn Function>>) -> Var {
        self.nodes.push(Node { value, func });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copy of the recorded value with its gradient attached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = &self.grads[v.0] {
            t.accumulate_grad(g);
        }
        t
    }

    /// Name of the operation that produced `v`, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].func.as_ref().map(|f| f.name())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node up to `loss` is visited once in reverse order. Leaf
    /// gradients are added to whatever a previous sweep left behind.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let value = &self.nodes[loss.0].value;
        if !value.is_scalar() {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        if !value.requires_grad() {
            return Ok(());
        }
        // Intermediate gradients belong to one sweep; only leaves accumulate.
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.func.is_some() {
                *grad = None;
            }
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(func) = self.nodes[i].func.as_ref() else {
                continue;
            };
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let values = TapeValues { nodes: &self.nodes };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            func.backward(&values, &self.nodes[i].value, &grad_out, &mut sink);
            self.grads[i] = Some(grad_out);
        }
        Ok(())
    }
}
