//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] records one node per primitive applied to a tensor that depends
//! on a leaf. Tensors built only from constants carry no node and cost nothing
//! at backward time. A tape is single-owner; run independent forward passes
//! on independent tapes.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{self, matmul_nt, matmul_tn, Array};
use super::AdError;

pub(crate) type NodeId = usize;

/// Recorded primitive with parent node ids and the forward values its
/// vector-Jacobian product needs.
pub(crate) enum Op {
    Leaf,
    Add(Option<NodeId>, Option<NodeId>),
    Sub(Option<NodeId>, Option<NodeId>),
    Mul(Option<NodeId>, Option<NodeId>, Rc<Array>, Rc<Array>),
    Div(Option<NodeId>, Option<NodeId>, Rc<Array>, Rc<Array>),
    MatMul(Option<NodeId>, Option<NodeId>, Rc<Array>, Rc<Array>),
    Neg(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId, [usize; 2]),
    SumCols(NodeId, usize),
    Exp(NodeId, Rc<Array>),
    Log(NodeId, Rc<Array>),
    Tanh(NodeId, Rc<Array>),
    Sigmoid(NodeId, Rc<Array>),
    Softplus(NodeId, Rc<Array>),
    Square(NodeId, Rc<Array>),
    Clamp(NodeId, Vec<bool>),
    Concat(Vec<(Option<NodeId>, usize)>, usize),
    SliceCols(NodeId, usize, usize, usize),
    SliceRows(NodeId, usize, usize, usize),
    BroadcastRows(NodeId),
    BroadcastScalar(NodeId),
    /// Per-row `log|det A_k|` of `d x d` blocks; saves the inverse-transposes.
    LogAbsDet(NodeId, usize, Vec<f64>),
    /// Per-row `y_k = A_k x_k` with constant `A_k`.
    RowMatVec(NodeId, usize, Rc<Array>),
}

struct TapeInner {
    nodes: Vec<Op>,
    generation: u64,
}

/// The computation tape.
pub struct Tape {
    inner: RefCell<TapeInner>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                generation: 0,
            }),
            recording: true,
        }
    }

    /// A tape that never records: leaves behave like constants and memory is
    /// released as soon as intermediate tensors drop.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of nodes recorded since the last backward pass.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes; tensors from earlier passes become stale.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    /// A differentiable leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, value: Array) -> Tensor<'_> {
        let node = if self.recording {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Op::Leaf);
            Some((inner.nodes.len() - 1, inner.generation))
        } else {
            None
        };
        Tensor {
            tape: self,
            node,
            value: Rc::new(value),
        }
    }

    /// A constant: carries a value but no node.
    pub fn constant(&self, value: Array) -> Tensor<'_> {
        Tensor {
            tape: self,
            node: None,
            value: Rc::new(value),
        }
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.constant(Array::scalar(v))
    }

    pub(crate) fn push(&self, op: Op) -> (NodeId, u64) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(op);
        (inner.nodes.len() - 1, inner.generation)
    }

    pub(crate) fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    /// Runs the backward pass from a scalar root and consumes the tape.
    pub fn backward(&self, root: &Tensor<'_>) -> Result<Gradients, AdError> {
        if root.value.len() != 1 {
            return Err(AdError::NonScalarRoot(root.value.shape()));
        }
        let generation = self.generation();
        let Some(root_id) = root.node_id()? else {
            self.reset();
            return Ok(Gradients {
                generation,
                grads: Vec::new(),
            });
        };
        let nodes = {
            let mut inner = self.inner.borrow_mut();
            inner.generation += 1;
            std::mem::take(&mut inner.nodes)
        };
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root_id] = Some(Array::scalar(1.0));

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = &nodes[id];
            backprop(op, &g, &mut grads);
            if matches!(op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        for (id, op) in nodes.iter().enumerate() {
            if !matches!(op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { generation, grads })
    }
}

fn accumulate(grads: &mut [Option<Array>], id: Option<NodeId>, g: Array) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(op: &Op, g: &Array, grads: &mut [Option<Array>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b, av, bv) => {
            if a.is_some() {
                accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
            }
            if b.is_some() {
                accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
            }
        }
        Op::Div(a, b, av, bv) => {
            if a.is_some() {
                accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
            }
            if b.is_some() {
                let mut gb = g.zip_map(av, |x, y| -x * y);
                for (o, d) in gb.data_mut().iter_mut().zip(bv.data()) {
                    *o /= d * d;
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::MatMul(a, b, av, bv) => {
            if a.is_some() {
                accumulate(grads, *a, matmul_nt(g, bv));
            }
            if b.is_some() {
                accumulate(grads, *b, matmul_tn(av, g));
            }
        }
        Op::Neg(a) => accumulate(grads, Some(*a), g.map(|v| -v)),
        Op::Scale(a, c) => accumulate(grads, Some(*a), g.map(|v| v * c)),
        Op::Sum(a, shape) => accumulate(grads, Some(*a), Array::full(shape[0], shape[1], g.item())),
        Op::SumCols(a, cols) => {
            let rows = g.rows();
            let mut out = Array::zeros(rows, *cols);
            for r in 0..rows {
                let gv = g.get(r, 0);
                for c in 0..*cols {
                    out.set(r, c, gv);
                }
            }
            accumulate(grads, Some(*a), out);
        }
        Op::Exp(a, out) => accumulate(grads, Some(*a), g.zip_map(out, |x, y| x * y)),
        Op::Log(a, inp) => accumulate(grads, Some(*a), g.zip_map(inp, |x, y| x / y)),
        Op::Tanh(a, out) => accumulate(grads, Some(*a), g.zip_map(out, |x, y| x * (1.0 - y * y))),
        Op::Sigmoid(a, out) => {
            accumulate(grads, Some(*a), g.zip_map(out, |x, y| x * y * (1.0 - y)))
        }
        Op::Softplus(a, inp) => {
            accumulate(grads, Some(*a), g.zip_map(inp, |x, y| x * array::sigmoid(y)))
        }
        Op::Square(a, inp) => accumulate(grads, Some(*a), g.zip_map(inp, |x, y| 2.0 * x * y)),
        Op::Clamp(a, mask) => {
            let mut out = g.clone();
            for (o, &keep) in out.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *o = 0.0;
                }
            }
            accumulate(grads, Some(*a), out);
        }
        Op::Concat(parts, _total) => {
            let mut start = 0;
            for (id, cols) in parts {
                if id.is_some() {
                    accumulate(grads, *id, g.slice_cols(start, *cols));
                }
                start += cols;
            }
        }
        Op::SliceCols(a, start, len, in_cols) => {
            let rows = g.rows();
            let mut out = Array::zeros(rows, *in_cols);
            for r in 0..rows {
                for c in 0..*len {
                    out.set(r, start + c, g.get(r, c));
                }
            }
            accumulate(grads, Some(*a), out);
        }
        Op::SliceRows(a, start, len, in_rows) => {
            let cols = g.cols();
            let mut out = Array::zeros(*in_rows, cols);
            out.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
            accumulate(grads, Some(*a), out);
        }
        Op::BroadcastRows(a) => {
            let cols = g.cols();
            let mut out = Array::zeros(1, cols);
            for r in 0..g.rows() {
                for c in 0..cols {
                    out.data_mut()[c] += g.get(r, c);
                }
            }
            accumulate(grads, Some(*a), out);
        }
        Op::BroadcastScalar(a) => accumulate(grads, Some(*a), Array::scalar(g.sum())),
        Op::LogAbsDet(a, d, inv_t) => {
            let dd = d * d;
            let rows = g.rows();
            let mut out = Array::zeros(rows, dd);
            for r in 0..rows {
                let gv = g.get(r, 0);
                for k in 0..dd {
                    out.set(r, k, gv * inv_t[r * dd + k]);
                }
            }
            accumulate(grads, Some(*a), out);
        }
        Op::RowMatVec(a, d, mats) => {
            let rows = g.rows();
            let mut out = Array::zeros(rows, *d);
            for r in 0..rows {
                let m = mats.row_slice(r);
                for j in 0..*d {
                    let mut acc = 0.0;
                    for i in 0..*d {
                        acc += m[i * d + j] * g.get(r, i);
                    }
                    out.set(r, j, acc);
                }
            }
            accumulate(grads, Some(*a), out);
        }
    }
}

/// A value produced during a forward pass, optionally tracked on a tape.
#[derive(Clone)]
pub struct Tensor<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) node: Option<(NodeId, u64)>,
    pub(crate) value: Rc<Array>,
}

impl<'t> Tensor<'t> {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shared_value(&self) -> Rc<Array> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value.shape()
    }

    pub fn rows(&self) -> usize {
        self.value.rows()
    }

    pub fn cols(&self) -> usize {
        self.value.cols()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Whether this tensor depends on a leaf of the active tape.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor<'t> {
        Tensor {
            tape: self.tape,
            node: None,
            value: Rc::clone(&self.value),
        }
    }

    pub(crate) fn node_id(&self) -> Result<Option<NodeId>, AdError> {
        match self.node {
            None => Ok(None),
            Some((id, generation)) => {
                if generation != self.tape.generation() {
                    Err(AdError::NotOnTape)
                } else {
                    Ok(Some(id))
                }
            }
        }
    }
}

/// Gradients of a scalar root with respect to every leaf of a consumed tape.
pub struct Gradients {
    generation: u64,
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if the root did not depend on it.
    pub fn get(&self, leaf: &Tensor<'_>) -> Result<Option<&Array>, AdError> {
        match leaf.node {
            None => Ok(None),
            Some((id, generation)) => {
                if generation != self.generation {
                    return Err(AdError::NotOnTape);
                }
                Ok(self.grads.get(id).and_then(Option::as_ref))
            }
        }
    }

    /// Gradient with respect to a leaf, zeros when it did not contribute.
    pub fn wrt(&self, leaf: &Tensor<'_>) -> Result<Array, AdError> {
        let [r, c] = leaf.shape();
        Ok(self.get(leaf)?.cloned().unwrap_or_else(|| Array::zeros(r, c)))
    }
}
