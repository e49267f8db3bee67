//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every operation allocates a fresh node holding its forward value, a
//! gradient buffer, handles to its parent nodes, and a backward closure that
//! routes upstream gradient into the parents. `backward` on a scalar loss
//! linearizes the reachable graph into a [`Tape`] (topological order) and
//! replays the closures once each, newest first.
//!
//! Tensors are `Rc`-shared and deliberately `!Send`: each worker thread owns
//! its own graph, parameters are only read during forward passes, and
//! gradient buffers are private to the thread that ran backward.

mod check;
mod ops;

pub use check::{grad_check, GradCheckReport};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Additive mask value standing in for minus infinity. Softmax subtracts the
/// row max before exponentiating, so masked entries underflow to exactly 0.
pub const MASK_BLOCK: f64 = -1e9;

/// Numeric precision for stored values. `F32` rounds every op result (and,
/// after each backward pass, every accumulated gradient) through `f32`;
/// `F64` keeps full doubles. Gradient checking always forces `F64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

pub(crate) fn quantize(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for x in data {
            *x = *x as f32 as f64;
        }
    }
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: receives this node's accumulated gradient and pushes
/// contributions into the parents' gradient buffers.
type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct TensorData {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Vec<f64>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    id: u64,
}

/// Dense row-major matrix with a gradient slot, shared by reference.
/// Cloning is cheap and aliases the same node.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<TensorData>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.0.borrow();
        write!(f, "Tensor({}x{}, id={})", d.rows, d.cols, d.id)
    }
}

impl Tensor {
    /// Leaf node with explicit contents. `data.len()` must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, mut data: Vec<f64>) -> Tensor {
        assert_eq!(
            data.len(),
            rows * cols,
            "from_vec: {} values for a {}x{} tensor",
            data.len(),
            rows,
            cols
        );
        quantize(&mut data);
        Tensor::new_leaf(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::new_leaf(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![value])
    }

    fn new_leaf(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor(Rc::new(RefCell::new(TensorData {
            rows,
            cols,
            data,
            grad: vec![0.0; n],
            parents: Vec::new(),
            backward: None,
            id: next_id(),
        })))
    }

    pub(crate) fn new_node(
        rows: usize,
        cols: usize,
        mut data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        quantize(&mut data);
        let n = data.len();
        Tensor(Rc::new(RefCell::new(TensorData {
            rows,
            cols,
            data,
            grad: vec![0.0; n],
            parents,
            backward: Some(backward),
            id: next_id(),
        })))
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let d = self.0.borrow();
        (d.rows, d.cols)
    }

    pub fn numel(&self) -> usize {
        let d = self.0.borrow();
        d.rows * d.cols
    }

    /// Copy of the forward values, row-major.
    pub fn value(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let d = self.0.borrow();
        assert!(r < d.rows && c < d.cols, "get({r},{c}) on {}x{}", d.rows, d.cols);
        d.data[r * d.cols + c]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.borrow();
        assert!(
            d.rows == 1 && d.cols == 1,
            "item() on {}x{} tensor",
            d.rows,
            d.cols
        );
        d.data[0]
    }

    /// Copy of the accumulated gradient, row-major.
    pub fn grad(&self) -> Vec<f64> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        for g in self.0.borrow_mut().grad.iter_mut() {
            *g = 0.0;
        }
    }

    /// Overwrite one element of the forward value (used by the optimizer and
    /// by finite-difference probes). Does not record anything on the tape.
    pub fn set(&self, r: usize, c: usize, v: f64) {
        let mut d = self.0.borrow_mut();
        let cols = d.cols;
        d.data[r * cols + c] = v;
    }

    /// In-place update of the forward values (optimizer step).
    pub fn update_data(&self, f: impl FnMut(&mut [f64])) {
        let mut d = self.0.borrow_mut();
        let mut f = f;
        f(&mut d.data);
        quantize(&mut d.data);
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.0.borrow_mut();
        debug_assert_eq!(delta.len(), d.grad.len());
        for (g, &v) in d.grad.iter_mut().zip(delta) {
            *g += v;
        }
    }

    fn id(&self) -> u64 {
        self.0.borrow().id
    }

    /// Reverse-mode sweep from a scalar loss. Seeds this node's gradient
    /// with 1 and propagates through every reachable node exactly once.
    pub fn backward(&self) -> Result<()> {
        {
            let d = self.0.borrow();
            if d.rows != 1 || d.cols != 1 {
                return Err(Error::NotScalar {
                    rows: d.rows,
                    cols: d.cols,
                });
            }
        }
        self.0.borrow_mut().grad[0] += 1.0;
        let tape = Tape::record(self);
        tape.replay();
        Ok(())
    }
}

/// Topologically ordered record of the nodes reachable from one root.
/// `order` lists dependencies before dependents; replay walks it in reverse
/// so each node's gradient is complete before its backward closure runs.
pub struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Tape {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS; the second stack entry flag marks
        // "children already expanded".
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            let parents = node.0.borrow().parents.clone();
            for p in parents {
                if !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }
        Tape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn replay(&self) {
        for node in self.order.iter().rev() {
            if node.0.borrow().backward.is_none() {
                continue;
            }
            // Lend the gradient buffer to the closure without copying. A node
            // is never its own parent, so closures only touch other nodes.
            let grad = std::mem::take(&mut node.0.borrow_mut().grad);
            {
                let d = node.0.borrow();
                if let Some(f) = d.backward.as_ref() {
                    f(&grad);
                }
            }
            node.0.borrow_mut().grad = grad;
        }
        if precision() == Precision::F32 {
            for node in &self.order {
                quantize(&mut node.0.borrow_mut().grad);
            }
        }
    }
}
