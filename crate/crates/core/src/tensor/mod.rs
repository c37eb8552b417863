//! Dense row-major 2-D tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that touches a tensor with `requires_grad` records a graph
//! node holding its inputs; [`Tensor::backward`] walks that graph in reverse
//! topological order. Values are immutable after construction, only the
//! gradient buffer changes. Parameters are therefore updated by building new
//! leaf tensors, and a fresh graph is recorded on every forward pass.
//!
//! Only two broadcasting forms exist: scalar operands (`*_scalar` methods) and
//! a `1×M` row added to every row of an `N×M` matrix ([`Tensor::add_row`]).
//! Anything else is rejected with [`Error::ShapeMismatch`].

mod gradcheck;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

pub use gradcheck::{
    finite_difference_check, finite_difference_report, GradCheckReport, DEFAULT_FD_EPS,
};

use crate::error::{Error, Result};
use ops::Op;

/// Rows whose Euclidean norm falls at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

struct Inner {
    shape: [usize; 2],
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
}

impl Tensor {
    /// Creates a constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: [usize; 2]) -> Result<Self> {
        if shape[0] * shape[1] != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                shape[0] * shape[1],
                data.len()
            )));
        }
        Ok(Self::leaf(data, shape, false))
    }

    /// Creates a leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: [usize; 2]) -> Result<Self> {
        Ok(Self::new(data, shape)?.with_requires_grad(true))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], [1, 1], false)
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Self::leaf(vec![0.0; shape[0] * shape[1]], shape, false)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::invalid(format!(
                "ragged rows: row 0 has {cols} values, row {bad} has {}",
                rows[bad].len()
            )));
        }
        Self::new(rows.concat(), [rows.len(), cols])
    }

    /// Returns a new leaf sharing no graph with `self`.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::leaf(self.0.data.clone(), self.0.shape, requires_grad)
    }

    /// Constant copy of the values; gradients never flow through it.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    fn leaf(data: Vec<f64>, shape: [usize; 2], requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node: None,
        }))
    }

    /// Wraps an op result, recording a graph node only if some input needs it.
    fn from_op(data: Vec<f64>, shape: [usize; 2], op: Op, inputs: Vec<Tensor>) -> Self {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then_some(Node { op, inputs });
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn shape(&self) -> [usize; 2] {
        self.0.shape
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[1]
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data[i * self.cols() + j]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "item",
                left: self.shape(),
                right: [1, 1],
            });
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was produced by a recorded operation.
    pub fn has_graph(&self) -> bool {
        self.0.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn id(&self) -> *const Inner {
        Arc::as_ptr(&self.0)
    }

    /// Accumulates d(self)/d(t) into the `grad` buffer of every reachable
    /// tensor with `requires_grad`, intermediates included.
    ///
    /// Buffers are summed into, never overwritten: calling `backward` twice on
    /// the same graph leaves exactly twice the gradient. Propagation uses
    /// per-call scratch buffers, so earlier accumulations never leak into the
    /// chain rule.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != [1, 1] {
            return Err(Error::ShapeMismatch {
                op: "backward (loss must be scalar)",
                left: self.shape(),
                right: [1, 1],
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(upstream) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let input_grads = node.op.backward(&node.inputs, &t.0.data, t.shape(), &upstream);
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.id(), g);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&upstream).for_each(|(a, b)| *a += b),
                None => *slot = Some(upstream),
            }
        }
        Ok(())
    }

    /// Post-order over the differentiable part of the graph rooted at `self`.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().filter(|i| i.requires_grad()) {
                    if !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad());
        if let Some(node) = &self.0.node {
            s.field("op", &node.op.name());
        }
        if self.len() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}
