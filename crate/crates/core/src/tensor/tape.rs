use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Primitive operation recorded on the tape. Indices refer to tape nodes.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    /// `op(a) · op(b)` where `op` optionally transposes.
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    /// `m×n + 1×n`
    AddRow(usize, usize),
    /// `m×n ⊙ m×1`
    MulCol(usize, usize),
    /// `1×n → m×n`
    BroadcastRows(usize),
    /// `m×1 → m×n`
    BroadcastCols(usize),
    SumAll(usize),
    /// `1×1 → shape`
    Expand(usize),
    /// `m×n → 1×n`
    SumRows(usize),
    /// `m×n → m×1`
    SumCols(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    /// Row-wise log-sum-exp, `m×n → m×1`.
    LogSumExpCols(usize),
    /// `out[i] = a[i, idx[i]]`, `m×n → m×1`.
    Gather(usize, Arc<[usize]>),
    /// Adjoint of `Gather`: `m×1 → m×n`.
    Scatter(usize, Arc<[usize]>),
    ConcatCols(usize, usize),
    SliceCols { a: usize, start: usize },
    PadCols { a: usize, start: usize },
    /// Mean of table rows per bag, `V×e → B×e`.
    EmbedBag(usize, Arc<Vec<Vec<usize>>>),
    /// Adjoint of `EmbedBag`: `B×e → V×e`.
    BagScatter(usize, Arc<Vec<Vec<usize>>>),
    /// Forward value supplied externally, identity backward.
    StraightThrough(usize),
}

impl<T> Op<T> {
    pub(crate) fn inputs(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([0, 0], 0),
            MatMul { a, b, .. } => ([a, b], 2),
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b) | ConcatCols(a, b) => {
                ([a, b], 2)
            }
            Neg(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | SumAll(a)
            | Expand(a)
            | SumRows(a)
            | SumCols(a)
            | Relu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Recip(a)
            | LogSumExpCols(a)
            | Gather(a, _)
            | Scatter(a, _)
            | SliceCols { a, .. }
            | PadCols { a, .. }
            | EmbedBag(a, _)
            | BagScatter(a, _)
            | StraightThrough(a) => ([a, 0], 1),
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede the
/// operations that consume them. A tape is confined to one thread.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) idx: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Leaf that gradients are taken with respect to.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), true)
    }

    /// Leaf excluded from [`Tape::backward`].
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Arc::new(value), false)
    }

    /// Leaf sharing storage with a model parameter.
    pub fn shared(&self, value: &Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_leaf(Arc::clone(value), requires_grad)
    }

    pub(crate) fn value(&self, idx: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[idx].value)
    }

    pub(crate) fn push(&self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let (inputs, n) = op.inputs();
        let requires_grad = inputs[..n].iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            idx: nodes.len() - 1,
        })
    }

    pub(crate) fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    fn owns(&self, v: &Var<'_, T>) -> bool {
        std::ptr::eq(self, v.tape) && v.idx < self.len()
    }

    /// Differentiable gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// The returned variables live on this tape and can be differentiated
    /// again. `None` marks a target the loss does not depend on. Targets may
    /// be intermediate values; the gradient is the partial derivative along
    /// paths leaving that value.
    pub fn grad<'t>(&'t self, loss: Var<'t, T>, wrt: &[Var<'t, T>]) -> Result<Vec<Option<Var<'t, T>>>> {
        if !self.owns(&loss) || wrt.iter().any(|w| !self.owns(w)) {
            return Err(Error::Detached);
        }
        let loss_shape = loss.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        let Some(start) = wrt.iter().map(|w| w.idx).min() else {
            return Ok(Vec::new());
        };
        if start > loss.idx {
            return Ok(vec![None; wrt.len()]);
        }

        let span = loss.idx + 1 - start;
        let mut marked = vec![false; span];
        for w in wrt {
            marked[w.idx - start] = true;
        }
        {
            let nodes = self.nodes.borrow();
            for i in start..=loss.idx {
                if marked[i - start] {
                    continue;
                }
                let (inputs, n) = nodes[i].op.inputs();
                marked[i - start] = inputs[..n]
                    .iter()
                    .any(|&j| j >= start && marked[j - start]);
            }
        }

        let mut grads: Vec<Option<Var<'t, T>>> = vec![None; span];
        if marked[span - 1] {
            let seed = self.constant(Tensor::full(&loss.shape(), T::one()));
            grads[span - 1] = Some(seed);
        }
        for i in (start..=loss.idx).rev() {
            let Some(g) = grads[i - start] else { continue };
            if !marked[i - start] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let (inputs, n) = op.inputs();
            if n == 0 {
                continue;
            }
            let out = Var { tape: self, idx: i };
            let contributions = super::ops::vjp(self, &op, out, g)?;
            for (k, &j) in inputs[..n].iter().enumerate() {
                if j < start || !marked[j - start] {
                    continue;
                }
                if let Some(c) = contributions[k] {
                    grads[j - start] = Some(match grads[j - start] {
                        Some(prev) => prev.add(c)?,
                        None => c,
                    });
                }
            }
        }
        Ok(wrt.iter().map(|w| grads[w.idx - start]).collect())
    }

    /// Numeric gradients of `loss` with respect to `wrt`; the tape is left
    /// exactly as it was.
    pub fn gradients(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Option<Tensor<T>>>> {
        let mark = self.len();
        let result = self.grad(loss, wrt).map(|gs| {
            gs.into_iter()
                .map(|g| g.map(|v| (*v.value()).clone()))
                .collect()
        });
        self.truncate(mark);
        result
    }

    /// Populates gradients for every leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let leaves: Vec<Var<'_, T>> = {
            let nodes = self.nodes.borrow();
            nodes
                .iter()
                .enumerate()
                .take(loss.idx + 1)
                .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
                .map(|(idx, _)| Var { tape: self, idx })
                .collect()
        };
        let grads = self.gradients(loss, &leaves)?;
        let map = leaves
            .iter()
            .zip(grads)
            .filter_map(|(v, g)| g.map(|g| (v.idx, g)))
            .collect();
        Ok(Gradients { map })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` if it did not participate.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.map.get(&v.idx)
    }

    /// Gradient for a leaf, zeros if it did not participate.
    pub fn wrt_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.cols()
    }

    /// The single value of a `1×1` variable.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }
}
