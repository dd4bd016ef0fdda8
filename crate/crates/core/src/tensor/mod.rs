//! Dense row-major `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that consumes a tensor requiring gradients records itself on
//! the output node. [`Tensor::backward`] walks the recorded graph in reverse
//! creation order, so each producing operation is visited exactly once and
//! contributions at fan-out points are summed.

mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use gradcheck::{
    analytic_gradient, compare_gradients, finite_diff_gradcheck, numeric_gradient, CheckParam, GradReport,
};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// A node in the differentiation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// The operation that produced a tensor, with whatever it saved for backward.
pub(crate) enum Op {
    MatMul { a: Tensor, b: Tensor },
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddLastDim(Tensor, Tensor),
    Softmax(Tensor),
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Tensor),
    DepthwiseConv3d { x: Tensor, kernel: Tensor },
    Reshape(Tensor),
    Permute { x: Tensor, axes: Vec<usize> },
    Concat { parts: Vec<Tensor>, axis: usize },
    Narrow { x: Tensor, axis: usize, start: usize },
    Sum(Tensor),
    MeanAxis { x: Tensor, axis: usize },
    CrossEntropy { logits: Tensor, target: usize, probs: Vec<f64> },
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>) -> Tensor {
        let requires_grad = op.is_some();
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Output of an operation: records `op` only if some input needs gradients.
    pub(crate) fn derived(shape: Vec<usize>, data: Vec<f64>, op: Op, track: bool) -> Tensor {
        Tensor::from_parts(shape, data, track.then_some(op))
    }

    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {len}"
            )));
        }
        Ok(())
    }

    /// A constant (no gradient) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::check_len(shape, data.len())?;
        Ok(Tensor::from_parts(shape.to_vec(), data, None))
    }

    /// A leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::shared(shape, Arc::new(data), true)
    }

    /// A leaf over an existing buffer; no copy is made.
    pub fn shared(shape: &[usize], data: Arc<Vec<f64>>, requires_grad: bool) -> Result<Tensor> {
        Tensor::check_len(shape, data.len())?;
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().take();
    }

    /// Identity of the underlying node; equal ids mean the same graph vertex.
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Populates `grad` on every gradient-requiring tensor reachable from this
    /// scalar. Repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        // Inputs are always created before outputs, so descending ids is a
        // valid reverse topological order.
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            if let Some(op) = t.op() {
                let mut sink = GradSink { grads: &mut grads };
                op.backward(&t, &g, &mut sink);
            }
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Accumulator handed to each operation's backward rule.
pub(crate) struct GradSink<'a> {
    grads: &'a mut HashMap<u64, Vec<f64>>,
}

impl GradSink<'_> {
    /// Gives `f` the (zero-initialized on first use) gradient buffer of `t`.
    /// Skips tensors that do not require gradients.
    pub(crate) fn with(&mut self, t: &Tensor, f: impl FnOnce(&mut [f64])) {
        if !t.requires_grad() {
            return;
        }
        let buf = self
            .grads
            .entry(t.id())
            .or_insert_with(|| vec![0.0; t.numel()]);
        f(buf);
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
