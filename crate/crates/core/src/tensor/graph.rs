use std::fmt;

use super::Tensor;
use crate::error::{PahError, Result};
use crate::params::ParamId;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// A differentiable operation defined outside the tensor core (used for
/// fused losses). `backward` returns one optional gradient per input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Reshape(Var),
    AddBias { x: Var, bias: Var },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Linear { x: Var, w: Var },
    MatMul { a: Var, b: Var },
    Softmax(Var),
    LogSoftmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalMax { x: Var, argmax: Vec<usize> },
    GlobalAvg(Var),
    MaskedMax {
        x: Var,
        mask: Vec<f64>,
        argmax: Vec<usize>,
    },
    PartPool { probs: Var, feats: Var },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Gather { x: Var, index: Vec<usize> },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Reshape(_) => "reshape",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GlobalMax { .. } => "global_max_pool",
            Op::GlobalAvg(_) => "global_avg_pool",
            Op::MaskedMax { .. } => "masked_max_pool",
            Op::PartPool { .. } => "part_pool",
            Op::Concat(_) => "concat",
            Op::StackRows(_) => "stack_rows",
            Op::Gather { .. } => "gather",
            Op::Custom { op, .. } => op.name(),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::GlobalAvg(x) => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::Linear { x, w } => vec![*x, *w],
            Op::MatMul { a, b } => vec![*a, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GlobalMax { x, .. } | Op::MaskedMax { x, .. } | Op::Gather { x, .. } => vec![*x],
            Op::PartPool { probs, feats } => vec![*probs, *feats],
            Op::Concat(v) | Op::StackRows(v) => v.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// Computation tape. Nodes are appended in execution order, so reverse
/// index order is a valid reverse topological order.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
    ln_clamped: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Graph {
    /// A tape that tracks gradients for parameters and grad leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            ln_clamped: 0,
        }
    }

    /// A tape for inference: parameters are recorded as constants.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            ln_clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of log evaluations whose argument was clamped to
    /// [`super::LN_CLAMP`].
    pub fn ln_clamped(&self) -> usize {
        self.ln_clamped
    }

    pub(crate) fn note_ln_clamped(&mut self, n: usize) {
        self.ln_clamped += n;
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, self.grad_enabled)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        self.push_unchecked(t.clone(), Op::Param(id), self.grad_enabled)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(PahError::NonFinite(format!("forward {}", op.name())));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(PahError::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        self.backward_from(vec![(loss, Tensor::full(shape, 1.0))])
    }

    /// Reverse pass seeded with upstream gradients for arbitrary nodes.
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor)>) -> Result<Grads> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(PahError::Dimension(format!(
                    "seed gradient shape {:?} does not match node shape {:?}",
                    g.shape(),
                    self.shape(v)
                )));
            }
            start = start.max(v.0 + 1);
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..start).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf | Op::Param(_));
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(PahError::NonFinite(format!("backward {}", node.op.name())));
            }
            for (input, gi) in self.vjp(i, &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(PahError::NonFinite(format!(
                        "backward into {}",
                        self.nodes[i].op.name()
                    )));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Grads { grads, params })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Gradients of leaves and parameters after a reverse pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients, one entry per parameter node that received
    /// gradient. A parameter recorded twice on the tape yields two entries.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}
