//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every recorded node stores its forward value, its operation, and the
//! indices of its parents; nodes are created in topological order and never
//! mutated. The backward pass holds no per-node gradient state: it emits the
//! gradient computation as *new nodes on the same tape*, built from the same
//! primitive set, so a gradient can be fed back into a loss and
//! differentiated again. This is what makes gradient-norm penalties
//! trainable: the penalty's own parameter gradient is just a second backward
//! pass over the (grown) tape.
//!
//! Discontinuous primitives (`relu`, `leaky_relu`, max reduction) contribute
//! constant masks captured at their forward value, which is the usual
//! almost-everywhere-correct convention.

use std::cell::RefCell;
use std::fmt;

use crate::tensor::{Tensor, TensorError};

/// Epsilon added under the square root in [`Tape::grad_norm`] so the norm is
/// differentiable at zero gradient.
pub const GRAD_NORM_EPSILON: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operation set. Backward rules for every member are expressed
/// in terms of the same set, which keeps the tape closed under
/// differentiation.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Leaf holding externally supplied data (parameters, inputs, constants).
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Matmul,
    Transpose,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Square,
    Sqrt,
    /// Sum of all elements, producing a scalar.
    Sum,
    /// Mean of all elements, producing a scalar.
    Mean,
    /// `[n, m] -> [n, 1]` row-wise sum.
    RowSum,
    /// `[n, m] -> [m]` column-wise sum.
    ColSum,
    /// Maximum element as a scalar; gradient flows to the lowest-index
    /// maximizer only.
    MaxReduce,
    /// Expand a scalar, `[m]` row, or `[n, 1]` column to the target shape.
    BroadcastAs(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowSum => "row_sum",
            OpKind::ColSum => "col_sum",
            OpKind::MaxReduce => "max_reduce",
            OpKind::BroadcastAs(_) => "broadcast_as",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Leaf => 0,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Matmul => 2,
            _ => 1,
        }
    }
}

/// Errors raised while recording operations or running backward passes.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    /// Wrong number of inputs passed to [`Tape::record`].
    WrongArity { op: &'static str, expected: usize, got: usize },
    /// The root of a backward pass must hold exactly one element.
    RootNotScalar { shape: Vec<usize> },
    /// An operation produced a non-finite value.
    NonFinite { op: &'static str },
    /// The differentiated input must be marked as requiring gradients.
    RequiresGrad { what: &'static str },
    /// Underlying tensor construction failed.
    Tensor(TensorError),
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::ShapeMismatch { op, shapes } => {
                write!(f, "{op}: incompatible operand shapes {shapes:?}")
            }
            TapeError::WrongArity { op, expected, got } => {
                write!(f, "{op}: expected {expected} inputs, got {got}")
            }
            TapeError::RootNotScalar { shape } => {
                write!(f, "backward root must be scalar-shaped, got {shape:?}")
            }
            TapeError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            TapeError::RequiresGrad { what } => {
                write!(f, "{what} must be recorded with requires_grad")
            }
            TapeError::Tensor(e) => write!(f, "tensor error: {e}"),
        }
    }
}

impl std::error::Error for TapeError {}

impl From<TensorError> for TapeError {
    fn from(e: TensorError) -> Self {
        TapeError::Tensor(e)
    }
}

struct NodeRecord {
    value: Tensor,
    op: OpKind,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// How a binary elementwise operation lines its operands up.
enum PairPlan {
    Same,
    LhsScalar,
    RhsScalar,
    /// rhs is an `[m]` vector broadcast across the rows of an `[n, m]` lhs.
    RhsRow,
}

fn pair_plan(op: &'static str, lhs: &[usize], rhs: &[usize], allow_row: bool) -> Result<PairPlan, TapeError> {
    if lhs == rhs {
        return Ok(PairPlan::Same);
    }
    // Any single-element tensor acts as a scalar regardless of rank ([1] and
    // [1, 1] both occur: reductions produce the former, 1x1 matrix products
    // the latter).
    let lhs_scalar = lhs.iter().product::<usize>() == 1;
    let rhs_scalar = rhs.iter().product::<usize>() == 1;
    if rhs_scalar {
        return Ok(PairPlan::RhsScalar);
    }
    if lhs_scalar {
        return Ok(PairPlan::LhsScalar);
    }
    if allow_row && lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        return Ok(PairPlan::RhsRow);
    }
    Err(TapeError::ShapeMismatch { op, shapes: vec![lhs.to_vec(), rhs.to_vec()] })
}

/// An append-only graph of [`Tensor`] computations.
///
/// Interior mutability lets closures capture `&Tape` and record freely; the
/// tape is single-threaded by design (hand one per training iteration).
pub struct Tape {
    nodes: RefCell<Vec<NodeRecord>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf node holding `value`. Gradients are only tracked
    /// through leaves recorded with `requires_grad = true`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(NodeRecord { value, op: OpKind::Leaf, parents: vec![], requires_grad })
    }

    /// Inserts a constant leaf (no gradient tracking).
    pub fn constant(&self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// A clone of the forward value stored at `id`.
    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    /// The sole element of a scalar-shaped node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn push(&self, record: NodeRecord) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(record);
        NodeId(nodes.len() - 1)
    }

    /// Records `op` applied to `inputs`, validating arity and shapes, and
    /// returns the new node. Results are checked to be finite so numerical
    /// blow-ups surface at the operation that caused them.
    pub fn record(&self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId, TapeError> {
        let expected = op.arity();
        if inputs.len() != expected {
            return Err(TapeError::WrongArity { op: op.name(), expected, got: inputs.len() });
        }
        let value = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|id| nodes[id.0].requires_grad)
        };
        Ok(self.push(NodeRecord { value, op, parents: inputs.to_vec(), requires_grad }))
    }

    fn forward(&self, op: &OpKind, inputs: &[NodeId]) -> Result<Tensor, TapeError> {
        let nodes = self.nodes.borrow();
        let v = |i: usize| -> &Tensor { &nodes[inputs[i].0].value };
        let name = op.name();
        let out = match op {
            OpKind::Leaf => unreachable!("leaves are recorded through Tape::leaf"),
            OpKind::Add => elementwise_pair(name, v(0), v(1), true, |a, b| a + b)?,
            OpKind::Sub => elementwise_pair(name, v(0), v(1), true, |a, b| a - b)?,
            OpKind::Mul => elementwise_pair(name, v(0), v(1), false, |a, b| a * b)?,
            OpKind::Div => elementwise_pair(name, v(0), v(1), false, |a, b| a / b)?,
            OpKind::Neg => v(0).map(|x| -x),
            OpKind::Matmul => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(TapeError::ShapeMismatch {
                        op: name,
                        shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
                    });
                }
                a.matmul(b)
            }
            OpKind::Transpose => {
                let a = v(0);
                if a.rank() != 2 {
                    return Err(TapeError::ShapeMismatch {
                        op: name,
                        shapes: vec![a.shape().to_vec()],
                    });
                }
                a.transpose()
            }
            OpKind::Relu => v(0).map(|x| x.max(0.0)),
            OpKind::LeakyRelu(slope) => {
                let s = *slope;
                v(0).map(|x| if x > 0.0 { x } else { s * x })
            }
            OpKind::Tanh => v(0).map(f64::tanh),
            OpKind::Sigmoid => v(0).map(stable_sigmoid),
            OpKind::Softplus => v(0).map(stable_softplus),
            OpKind::Square => v(0).map(|x| x * x),
            OpKind::Sqrt => v(0).map(f64::sqrt),
            OpKind::Sum => Tensor::scalar(v(0).sum()),
            OpKind::Mean => Tensor::scalar(v(0).mean()),
            OpKind::RowSum => {
                let a = v(0);
                if a.rank() != 2 {
                    return Err(TapeError::ShapeMismatch {
                        op: name,
                        shapes: vec![a.shape().to_vec()],
                    });
                }
                a.row_sums()
            }
            OpKind::ColSum => {
                let a = v(0);
                if a.rank() != 2 {
                    return Err(TapeError::ShapeMismatch {
                        op: name,
                        shapes: vec![a.shape().to_vec()],
                    });
                }
                a.col_sums()
            }
            OpKind::MaxReduce => Tensor::scalar(v(0).max_with_index().0),
            OpKind::BroadcastAs(target) => {
                let a = v(0);
                a.broadcast_as(target).ok_or_else(|| TapeError::ShapeMismatch {
                    op: name,
                    shapes: vec![a.shape().to_vec(), target.clone()],
                })?
            }
        };
        Ok(out)
    }

    // ── convenience wrappers over `record` ──────────────────────────────

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Div, &[a, b])
    }

    pub fn neg(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Neg, &[a])
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Matmul, &[a, b])
    }

    pub fn transpose(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Transpose, &[a])
    }

    pub fn relu(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn leaky_relu(&self, a: NodeId, slope: f64) -> Result<NodeId, TapeError> {
        self.record(OpKind::LeakyRelu(slope), &[a])
    }

    pub fn tanh(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Sigmoid, &[a])
    }

    pub fn softplus(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Softplus, &[a])
    }

    pub fn square(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Square, &[a])
    }

    pub fn sqrt(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Sqrt, &[a])
    }

    pub fn sum(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn mean(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn row_sum(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::RowSum, &[a])
    }

    pub fn col_sum(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::ColSum, &[a])
    }

    pub fn max_reduce(&self, a: NodeId) -> Result<NodeId, TapeError> {
        self.record(OpKind::MaxReduce, &[a])
    }

    pub fn broadcast_as(&self, a: NodeId, target: &[usize]) -> Result<NodeId, TapeError> {
        self.record(OpKind::BroadcastAs(target.to_vec()), &[a])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Gradient of the scalar `root` with respect to each node in `wrt`,
    /// returned as plain tensors. A `wrt` entry that `root` does not depend
    /// on yields a zero tensor of its shape.
    pub fn backward(&self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, TapeError> {
        let ids = self.backward_graph(root, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id)).collect())
    }

    /// Like [`Tape::backward`] but returns the gradients as live nodes, so
    /// they can enter further recorded expressions and be differentiated
    /// again (the second backward pass walks the nodes this one emitted).
    pub fn backward_graph(&self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, TapeError> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(TapeError::RootNotScalar { shape: root_shape });
        }

        // Restrict the sweep to ancestors of the root.
        let upper = root.0 + 1;
        let mut reachable = vec![false; upper];
        reachable[root.0] = true;
        let mut stack = vec![root.0];
        while let Some(idx) = stack.pop() {
            let parents: Vec<usize> = {
                let nodes = self.nodes.borrow();
                nodes[idx].parents.iter().map(|p| p.0).collect()
            };
            for p in parents {
                if !reachable[p] {
                    reachable[p] = true;
                    stack.push(p);
                }
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; upper];
        grads[root.0] = Some(self.constant(Tensor::filled(&root_shape, 1.0)?));

        for idx in (0..upper).rev() {
            if !reachable[idx] {
                continue;
            }
            let Some(g) = grads[idx] else { continue };
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                (nodes[idx].op.clone(), nodes[idx].parents.clone())
            };
            self.propagate(NodeId(idx), &op, &parents, g, &mut grads)?;
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(id) => Ok(id),
                None => Ok(self.constant(Tensor::zeros(&self.shape(w))?)),
            })
            .collect()
    }

    /// Emits the gradient contribution of one node to each of its parents.
    fn propagate(
        &self,
        node: NodeId,
        op: &OpKind,
        parents: &[NodeId],
        g: NodeId,
        grads: &mut [Option<NodeId>],
    ) -> Result<(), TapeError> {
        match op {
            OpKind::Leaf => {}
            OpKind::Add => {
                self.accumulate(grads, parents[0], self.reduce_to(g, parents[0])?)?;
                self.accumulate(grads, parents[1], self.reduce_to(g, parents[1])?)?;
            }
            OpKind::Sub => {
                self.accumulate(grads, parents[0], self.reduce_to(g, parents[0])?)?;
                let neg = self.neg(g)?;
                self.accumulate(grads, parents[1], self.reduce_to(neg, parents[1])?)?;
            }
            OpKind::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let da = self.mul_broadcast(g, b)?;
                self.accumulate(grads, a, self.reduce_to(da, a)?)?;
                let db = self.mul_broadcast(g, a)?;
                self.accumulate(grads, b, self.reduce_to(db, b)?)?;
            }
            OpKind::Div => {
                // y = a / b: da = g / b, db = -g * y / b.
                let (a, b) = (parents[0], parents[1]);
                let da = self.div(g, b)?;
                self.accumulate(grads, a, self.reduce_to(da, a)?)?;
                let gy = self.mul_broadcast(g, node)?;
                let db = self.neg(self.div(gy, b)?)?;
                self.accumulate(grads, b, self.reduce_to(db, b)?)?;
            }
            OpKind::Neg => {
                self.accumulate(grads, parents[0], self.neg(g)?)?;
            }
            OpKind::Matmul => {
                let (a, b) = (parents[0], parents[1]);
                let da = self.matmul(g, self.transpose(b)?)?;
                self.accumulate(grads, a, da)?;
                let db = self.matmul(self.transpose(a)?, g)?;
                self.accumulate(grads, b, db)?;
            }
            OpKind::Transpose => {
                self.accumulate(grads, parents[0], self.transpose(g)?)?;
            }
            OpKind::Relu => {
                let mask = self.constant(self.value(parents[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                self.accumulate(grads, parents[0], self.mul(g, mask)?)?;
            }
            OpKind::LeakyRelu(slope) => {
                let s = *slope;
                let mask = self.constant(self.value(parents[0]).map(|x| if x > 0.0 { 1.0 } else { s }));
                self.accumulate(grads, parents[0], self.mul(g, mask)?)?;
            }
            OpKind::Tanh => {
                // d tanh = 1 - y^2, rebuilt from the output node.
                let ones = self.constant(Tensor::filled(&self.shape(node), 1.0)?);
                let d = self.sub(ones, self.square(node)?)?;
                self.accumulate(grads, parents[0], self.mul(g, d)?)?;
            }
            OpKind::Sigmoid => {
                // d sigmoid = y * (1 - y).
                let ones = self.constant(Tensor::filled(&self.shape(node), 1.0)?);
                let d = self.mul(node, self.sub(ones, node)?)?;
                self.accumulate(grads, parents[0], self.mul(g, d)?)?;
            }
            OpKind::Softplus => {
                let d = self.sigmoid(parents[0])?;
                self.accumulate(grads, parents[0], self.mul(g, d)?)?;
            }
            OpKind::Square => {
                let two = self.scalar(2.0);
                let d = self.mul(parents[0], two)?;
                self.accumulate(grads, parents[0], self.mul(g, d)?)?;
            }
            OpKind::Sqrt => {
                // d sqrt = 1 / (2 y), rebuilt from the output node.
                let two = self.scalar(2.0);
                let denom = self.mul(node, two)?;
                self.accumulate(grads, parents[0], self.div_broadcast(g, denom)?)?;
            }
            OpKind::Sum => {
                let shape = self.shape(parents[0]);
                self.accumulate(grads, parents[0], self.broadcast_as(g, &shape)?)?;
            }
            OpKind::Mean => {
                let shape = self.shape(parents[0]);
                let n = self.scalar(shape.iter().product::<usize>() as f64);
                let scaled = self.div(g, n)?;
                self.accumulate(grads, parents[0], self.broadcast_as(scaled, &shape)?)?;
            }
            OpKind::RowSum | OpKind::ColSum => {
                let shape = self.shape(parents[0]);
                self.accumulate(grads, parents[0], self.broadcast_as(g, &shape)?)?;
            }
            OpKind::MaxReduce => {
                let value = self.value(parents[0]);
                let (_, argmax) = value.max_with_index();
                let mut mask = vec![0.0; value.numel()];
                mask[argmax] = 1.0;
                let mask = self.constant(Tensor::new(value.shape().to_vec(), mask)?);
                let expanded = self.broadcast_as(g, value.shape())?;
                self.accumulate(grads, parents[0], self.mul(expanded, mask)?)?;
            }
            OpKind::BroadcastAs(_) => {
                self.accumulate(grads, parents[0], self.reduce_to(g, parents[0])?)?;
            }
        }
        Ok(())
    }

    /// `g * other`, expanding `other` if its shape is smaller than `g`'s.
    fn mul_broadcast(&self, g: NodeId, other: NodeId) -> Result<NodeId, TapeError> {
        let gs = self.shape(g);
        let os = self.shape(other);
        if gs == os || os.iter().product::<usize>() == 1 {
            self.mul(g, other)
        } else {
            let expanded = self.broadcast_as(other, &gs)?;
            self.mul(g, expanded)
        }
    }

    /// `g / denom`, expanding `denom` if needed (mirrors [`mul_broadcast`]).
    fn div_broadcast(&self, g: NodeId, denom: NodeId) -> Result<NodeId, TapeError> {
        let gs = self.shape(g);
        let ds = self.shape(denom);
        if gs == ds || ds.iter().product::<usize>() == 1 {
            self.div(g, denom)
        } else {
            let expanded = self.broadcast_as(denom, &gs)?;
            self.div(g, expanded)
        }
    }

    /// Sums `g` down to the shape of `target`, inverting the broadcast that
    /// expanded `target` during the forward pass.
    fn reduce_to(&self, g: NodeId, target: NodeId) -> Result<NodeId, TapeError> {
        let gs = self.shape(g);
        let ts = self.shape(target);
        if gs == ts {
            return Ok(g);
        }
        if ts.iter().product::<usize>() == 1 {
            let total = self.sum(g)?;
            // `sum` yields shape [1]; restore the target's exact shape so
            // gradients always mirror their node (e.g. a [1, 1] sigma).
            return if ts == [1] { Ok(total) } else { self.broadcast_as(total, &ts) };
        }
        if gs.len() == 2 {
            let (n, m) = (gs[0], gs[1]);
            if ts == [m] {
                return self.col_sum(g);
            }
            if ts == [n, 1] {
                return self.row_sum(g);
            }
        }
        Err(TapeError::ShapeMismatch { op: "reduce_to", shapes: vec![gs, ts] })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<(), TapeError> {
        grads[target.0] = Some(match grads[target.0] {
            None => contribution,
            Some(existing) => self.add(existing, contribution)?,
        });
        Ok(())
    }

    /// Per-sample Euclidean norm of `d f_output / d input`.
    ///
    /// `input` is an `[n, d]` batch leaf with `requires_grad`; `f_output`
    /// must hold one value per row (any of `[n, 1]`, `[n]`, or `[1]` for
    /// `n = 1`). Rows must be processed independently by the function under
    /// test (true for the row-parallel networks in this crate), so seeding
    /// the backward pass from `sum(f_output)` recovers each row's own
    /// gradient. Returns an `[n, 1]` node (`[1]` for a rank-1 input);
    /// `sqrt(. + 1e-12)` keeps the norm differentiable at zero.
    pub fn grad_norm(&self, f_output: NodeId, input: NodeId) -> Result<NodeId, TapeError> {
        if !self.requires_grad(input) {
            return Err(TapeError::RequiresGrad { what: "grad_norm input" });
        }
        let in_shape = self.shape(input);
        let n = in_shape[0];
        let out_numel: usize = self.shape(f_output).iter().product();
        let expected = if in_shape.len() == 2 { n } else { 1 };
        if out_numel != expected {
            return Err(TapeError::ShapeMismatch {
                op: "grad_norm",
                shapes: vec![self.shape(f_output), in_shape],
            });
        }
        let seed = self.sum(f_output)?;
        let grad = self.backward_graph(seed, &[input])?[0];
        let sq = self.square(grad)?;
        let per_sample = if in_shape.len() == 2 { self.row_sum(sq)? } else { self.sum(sq)? };
        let eps = self.scalar(GRAD_NORM_EPSILON);
        let shifted = self.add(per_sample, eps)?;
        self.sqrt(shifted)
    }
}

fn elementwise_pair(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    allow_row: bool,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TapeError> {
    match pair_plan(op, a.shape(), b.shape(), allow_row)? {
        PairPlan::Same => Ok(a.zip_map(b, f)),
        PairPlan::RhsScalar => {
            let s = b.item();
            Ok(a.map(|x| f(x, s)))
        }
        PairPlan::LhsScalar => {
            let s = a.item();
            Ok(b.map(|x| f(s, x)))
        }
        PairPlan::RhsRow => {
            let expanded = b.broadcast_as(a.shape()).expect("plan guarantees row broadcast");
            Ok(a.zip_map(&expanded, f))
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &Tape, v: f64) -> NodeId {
        tape.leaf(Tensor::scalar(v), true)
    }

    #[test]
    fn record_add_computes_forward_value() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let c = tape.record(OpKind::Add, &[a, b]).unwrap();
        assert_eq!(tape.item(c), 5.0);
    }

    #[test]
    fn matmul_shape_mismatch_is_reported_with_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TapeError::ShapeMismatch { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_of_linear_scaling_returns_coefficient() {
        let tape = Tape::new();
        let x = scalar_leaf(&tape, 7.0);
        let three = tape.scalar(3.0);
        let y = tape.mul(three, x).unwrap();
        let grad = tape.backward(y, &[x]).unwrap();
        assert_eq!(grad[0].item(), 3.0);
    }

    #[test]
    fn backward_wrt_non_ancestor_is_zero_not_error() {
        let tape = Tape::new();
        let x = scalar_leaf(&tape, 1.0);
        let unrelated = tape.leaf(Tensor::vector(&[1.0, 2.0]).unwrap(), true);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y, &[unrelated]).unwrap();
        assert_eq!(grads[0], Tensor::zeros(&[2]).unwrap());
    }

    #[test]
    fn shared_subexpression_gradient_accumulates_once_per_use() {
        // root = g + g where g = x^2 must give exactly 2 * dg/dx.
        let tape = Tape::new();
        let x = scalar_leaf(&tape, 3.0);
        let g = tape.square(x).unwrap();
        let root = tape.add(g, g).unwrap();
        let grad = tape.backward(root, &[x]).unwrap()[0].item();

        let tape2 = Tape::new();
        let x2 = scalar_leaf(&tape2, 3.0);
        let g2 = tape2.square(x2).unwrap();
        let single = tape2.backward(g2, &[x2]).unwrap()[0].item();
        assert_eq!(grad, 2.0 * single);
    }

    #[test]
    fn two_backward_passes_from_the_same_root_agree() {
        // The tape holds no mutable gradient state, so repeating a backward
        // pass must reproduce the same values even after the first pass
        // appended its own nodes.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, -2.0, 0.5]).unwrap(), true);
        let h = tape.tanh(x).unwrap();
        let root = tape.sum(tape.square(h).unwrap()).unwrap();
        let first = tape.backward(root, &[x]).unwrap();
        let second = tape.backward(root, &[x]).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn grad_norm_of_fixed_linear_map_is_weight_norm() {
        // f(x) = x . (3, 4) has gradient (3, 4) for every sample: norm 5.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(4, 2, vec![0.3, -1.0, 2.0, 0.0, 5.0, 5.0, -2.0, 7.0]).unwrap(), true);
        let w = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let f = tape.matmul(x, w).unwrap();
        let norms = tape.grad_norm(f, x).unwrap();
        let v = tape.value(norms);
        assert_eq!(v.shape(), &[4, 1]);
        for &n in v.data() {
            assert!((n - 5.0).abs() < 1e-9, "norm {n} should be 5");
        }
    }

    #[test]
    fn grad_norm_of_half_squared_norm_is_input_norm() {
        // f(x) = ||x||^2 / 2 has gradient x, so the norm at (1, 2, 2) is 3.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 2.0]).unwrap(), true);
        let sq = tape.square(x).unwrap();
        let rs = tape.row_sum(sq).unwrap();
        let half = tape.scalar(0.5);
        let f = tape.mul(rs, half).unwrap();
        let norms = tape.grad_norm(f, x).unwrap();
        assert!((tape.item(norms) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn second_order_gradient_of_norm_penalty() {
        // f(x) = a * x^2 with a = 1, x = 1. The penalty
        // (|d f / d x| - 1)^2 = (2 a x - 1)^2 has derivative in a of
        // 2 (2 a x - 1) * 2 x = 4 at this point.
        let tape = Tape::new();
        let a = scalar_leaf(&tape, 1.0);
        let x = scalar_leaf(&tape, 1.0);
        let f = tape.mul(a, tape.square(x).unwrap()).unwrap();
        let gx = tape.backward_graph(f, &[x]).unwrap()[0];
        let norm = tape.sqrt(tape.add(tape.square(gx).unwrap(), tape.scalar(GRAD_NORM_EPSILON)).unwrap()).unwrap();
        let resid = tape.sub(norm, tape.scalar(1.0)).unwrap();
        let penalty = tape.square(resid).unwrap();
        let da = tape.backward(penalty, &[a]).unwrap()[0].item();
        assert!((da - 4.0).abs() < 1e-6, "d penalty / d a = {da}, expected 4");
    }

    #[test]
    fn second_order_matches_central_differences_on_scalar_chain() {
        // h(a) = (|d/dx (a x^2)| - 1)^2 at x = 1.2; compare the tape's
        // derivative in a against a central finite difference of h.
        let h = |a: f64| -> f64 {
            let tape = Tape::new();
            let an = tape.leaf(Tensor::scalar(a), true);
            let x = tape.leaf(Tensor::scalar(1.2), true);
            let f = tape.mul(an, tape.square(x).unwrap()).unwrap();
            let gx = tape.backward_graph(f, &[x]).unwrap()[0];
            let norm = tape
                .sqrt(tape.add(tape.square(gx).unwrap(), tape.scalar(GRAD_NORM_EPSILON)).unwrap())
                .unwrap();
            let resid = tape.sub(norm, tape.scalar(1.0)).unwrap();
            tape.item(tape.square(resid).unwrap())
        };
        let a0 = 0.8;
        let step = 1e-5;
        let fd = (h(a0 + step) - h(a0 - step)) / (2.0 * step);

        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(a0), true);
        let x = tape.leaf(Tensor::scalar(1.2), true);
        let f = tape.mul(a, tape.square(x).unwrap()).unwrap();
        let gx = tape.backward_graph(f, &[x]).unwrap()[0];
        let norm = tape
            .sqrt(tape.add(tape.square(gx).unwrap(), tape.scalar(GRAD_NORM_EPSILON)).unwrap())
            .unwrap();
        let resid = tape.sub(norm, tape.scalar(1.0)).unwrap();
        let penalty = tape.square(resid).unwrap();
        let da = tape.backward(penalty, &[a]).unwrap()[0].item();
        assert!((da - fd).abs() < 1e-6 * fd.abs().max(1.0), "tape {da} vs fd {fd}");
    }

    #[test]
    fn max_reduce_routes_gradient_to_lowest_tied_index() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[2.0, 5.0, 5.0]).unwrap(), true);
        let m = tape.max_reduce(x).unwrap();
        let grad = tape.backward(m, &[x]).unwrap();
        assert_eq!(grad[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn division_by_zero_surfaces_as_non_finite_error() {
        let tape = Tape::new();
        let a = tape.scalar(1.0);
        let b = tape.scalar(0.0);
        assert!(matches!(tape.div(a, b), Err(TapeError::NonFinite { op: "div" })));
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, 2.0]).unwrap(), true);
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y, &[x]), Err(TapeError::RootNotScalar { .. })));
    }

    #[test]
    fn softplus_and_sigmoid_are_stable_at_extremes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[-800.0, 0.0, 800.0]).unwrap());
        let sp = tape.softplus(x).unwrap();
        let sg = tape.sigmoid(x).unwrap();
        let sp = tape.value(sp);
        let sg = tape.value(sg);
        assert!((sp.data()[0]).abs() < 1e-300);
        assert!((sp.data()[1] - 2.0_f64.ln()).abs() < 1e-12);
        assert!((sp.data()[2] - 800.0).abs() < 1e-9);
        assert_eq!(sg.data()[0], 0.0);
        assert!((sg.data()[1] - 0.5).abs() < 1e-12);
        assert_eq!(sg.data()[2], 1.0);
    }
}
