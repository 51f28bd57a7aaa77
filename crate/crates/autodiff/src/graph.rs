use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};
use crate::{conv, elementwise, linalg, nn, shape};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation plus whatever the backward pass needs beyond the
/// input and output values already stored on the tape.
#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    MatMul { a: Var, b: Var, rows: usize, inner: usize, cols: usize },
    BatchMatMul { a: Var, b: Var, groups: usize, n: usize, k: usize, m: usize, transpose_b: bool },
    Softmax { x: Var, causal: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Huber { pred: Var, target: Vec<T>, delta: T },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    CausalConv1d { signal: Var, kernel: Var },
    ConvBank { signal: Var, kernels: Var, lengths: Vec<usize> },
    FilterBankMix { signal: Var, kernels: Var, weights: Var, lengths: Vec<usize> },
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Sigmoid(a) | Reshape(a) | SumAll(a) => vec![*a],
            Dropout { x, .. } | Softmax { x, .. } | Permute { x, .. } | SumAxis { x, .. } => vec![*x],
            MatMul { a, b, .. } | BatchMatMul { a, b, .. } => vec![*a, *b],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Embedding { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            Huber { pred, .. } => vec![*pred],
            CausalConv1d { signal, kernel } => vec![*signal, *kernel],
            ConvBank { signal, kernels, .. } => vec![*signal, *kernels],
            FilterBankMix { signal, kernels, weights, .. } => vec![*signal, *kernels, *weights],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Outcome of [`Graph::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackwardReport {
    /// The loss did not depend on any `requires_grad` leaf; nothing was done.
    pub detached: bool,
    /// Number of tape nodes whose backward rule ran.
    pub nodes_visited: usize,
}

/// Append-only tape. Nodes are pushed in evaluation order, so the index order
/// is a topological order of the DAG and backward is a single reverse sweep.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t` as a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.checked_leaf(shape, data, true)
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.checked_leaf(shape, data, false)
    }

    fn checked_leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return invalid(format!("leaf shape {:?} does not match {} values", shape, data.len()));
        }
        Ok(self.push_leaf(shape, data, requires_grad))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: data, shape, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well-formed");
        t.requires_grad = n.requires_grad;
        t.grad = self.grad(v).map(<[T]>::to_vec);
        t
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears accumulated gradients so [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// After it returns, every `requires_grad` node reachable from `loss` holds
    /// a gradient (zeros when no path carried signal).
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return invalid(format!("backward needs a scalar loss, got shape {:?}", root.shape));
        }
        if !root.requires_grad {
            log::warn!("backward called on a loss that does not depend on any trainable leaf");
            return Ok(BackwardReport { detached: true, nodes_visited: 0 });
        }

        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reachable[i] {
                for v in self.nodes[i].op.inputs() {
                    reachable[v.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.backward_node(i, &gout, &mut grads)?;
                visited += 1;
            }
            grads[i] = Some(gout);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if i <= loss.0 && reachable[i] && self.nodes[i].requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); self.nodes[i].value.len()]);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(BackwardReport { detached: false, nodes_visited: visited })
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = GradSink { nodes: &self.nodes, grads };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => elementwise::add_backward(gout, *a, *b, &mut acc),
            Op::Sub(a, b) => elementwise::sub_backward(gout, *a, *b, &mut acc),
            Op::Mul(a, b) => elementwise::mul_backward(gout, *a, *b, &mut acc),
            Op::Scale(a, c) => elementwise::scale_backward(gout, *a, *c, &mut acc),
            Op::AddRow(x, r) => elementwise::add_row_backward(gout, *x, *r, &mut acc),
            Op::MulRow(x, r) => elementwise::mul_row_backward(gout, *x, *r, &mut acc),
            Op::Relu(x) => elementwise::relu_backward(gout, *x, &mut acc),
            Op::Sigmoid(x) => elementwise::sigmoid_backward(gout, &node.value, *x, &mut acc),
            Op::Dropout { x, mask } => elementwise::dropout_backward(gout, *x, mask, &mut acc),
            Op::MatMul { a, b, rows, inner, cols } => {
                linalg::matmul_backward(gout, *a, *b, *rows, *inner, *cols, &mut acc)
            }
            Op::BatchMatMul { a, b, groups, n, k, m, transpose_b } => {
                linalg::bmm_backward(gout, *a, *b, (*groups, *n, *k, *m), *transpose_b, &mut acc)
            }
            Op::Softmax { x, causal } => nn::softmax_backward(gout, &node.value, &node.shape, *x, *causal, &mut acc),
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                nn::layer_norm_backward(gout, *x, *gamma, *beta, mean, rstd, &mut acc)
            }
            Op::Embedding { table, ids } => nn::embedding_backward(gout, *table, ids, &mut acc),
            Op::CrossEntropy { logits, targets, probs } => {
                nn::cross_entropy_backward(gout, *logits, targets, probs, &mut acc)
            }
            Op::Huber { pred, target, delta } => nn::huber_backward(gout, *pred, target, *delta, &mut acc),
            Op::Reshape(x) => acc.add(*x, |g| add_into(g, gout)),
            Op::Permute { x, perm } => shape::permute_backward(gout, &node.shape, *x, perm, &mut acc),
            Op::SumAll(x) => acc.add(*x, |g| g.iter_mut().for_each(|v| *v = *v + gout[0])),
            Op::SumAxis { x, axis } => shape::sum_axis_backward(gout, *x, *axis, &mut acc),
            Op::CausalConv1d { signal, kernel } => conv::causal_conv1d_backward(gout, *signal, *kernel, &mut acc),
            Op::ConvBank { signal, kernels, lengths } => {
                conv::conv_bank_backward(gout, *signal, *kernels, lengths, &mut acc)
            }
            Op::FilterBankMix { signal, kernels, weights, lengths } => {
                conv::filter_bank_mix_backward(gout, *signal, *kernels, *weights, lengths, &mut acc)
            }
        }
        Ok(())
    }
}

/// Accumulates input gradients during one backward step.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    pub fn value(&self, v: Var) -> &'a [T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &'a [usize] {
        &self.nodes[v.0].shape
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Runs `f` on the (zero-initialised on first use) gradient buffer of `v`,
    /// skipping nodes that do not require a gradient.
    pub fn add(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
