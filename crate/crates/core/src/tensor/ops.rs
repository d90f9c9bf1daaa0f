//! Forward primitives and their vector-Jacobian products.

use std::sync::Arc;

use super::tape::{Op, Tape, Var};
use super::{Scalar, Tensor, NORM_EPS};
use crate::error::{Error, Result};

fn mismatch(op: &'static str, lhs: &Tensor<impl Scalar>, rhs: &Tensor<impl Scalar>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Detached)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        let v = self.value().map(f);
        self.tape.push(op, v, name)
    }

    fn binary_same(
        self,
        other: Self,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        same_tape(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        self.tape.push(op, zip_map(&a, &b, f), name)
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(self, other: Self, ta: bool, tb: bool) -> Result<Self> {
        same_tape(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let (ar, ac) = (a.rows(), a.cols());
        let (br, bc) = (b.rows(), b.cols());
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", &a, &b));
        }
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), rsa, csa, b.data(), rsb, csb, &mut out);
        self.tape.push(
            Op::MatMul {
                a: self.idx,
                b: other.idx,
                ta,
                tb,
            },
            Tensor::from_parts(vec![m, n], out),
            "matmul",
        )
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary_same(other, Op::Add(self.idx, other.idx), "add", |x, y| x + y)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary_same(other, Op::Sub(self.idx, other.idx), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary_same(other, Op::Mul(self.idx, other.idx), "mul", |x, y| x * y)
    }

    pub fn neg(self) -> Result<Self> {
        self.unary(Op::Neg(self.idx), "neg", |x| -x)
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        let c = T::c(c);
        self.unary(Op::Scale(self.idx, c), "scale", move |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        let c = T::c(c);
        self.unary(Op::AddScalar(self.idx, c), "add_scalar", move |x| x + c)
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(self, row: Self) -> Result<Self> {
        same_tape(&self, &row)?;
        let (a, r) = (self.value(), row.value());
        if r.rows() != 1 || r.cols() != a.cols() {
            return Err(mismatch("add_row", &a, &r));
        }
        let n = a.cols();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(r.data()) {
                *x = *x + b;
            }
        }
        self.tape.push(
            Op::AddRow(self.idx, row.idx),
            Tensor::from_parts(vec![a.rows(), n], data),
            "add_row",
        )
    }

    /// Scales row `i` of an `m×n` matrix by `col[i]` (`col` is `m×1`).
    pub fn mul_col(self, col: Self) -> Result<Self> {
        same_tape(&self, &col)?;
        let (a, c) = (self.value(), col.value());
        if c.cols() != 1 || c.rows() != a.rows() {
            return Err(mismatch("mul_col", &a, &c));
        }
        let n = a.cols();
        let mut data = a.data().to_vec();
        for (chunk, &s) in data.chunks_mut(n.max(1)).zip(c.data()) {
            for x in chunk.iter_mut() {
                *x = *x * s;
            }
        }
        self.tape.push(
            Op::MulCol(self.idx, col.idx),
            Tensor::from_parts(vec![a.rows(), n], data),
            "mul_col",
        )
    }

    /// Repeats a `1×n` row `m` times.
    pub fn broadcast_rows(self, m: usize) -> Result<Self> {
        let r = self.value();
        if r.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: r.shape().to_vec(),
                rhs: vec![1, r.cols()],
            });
        }
        let data = r.data().repeat(m);
        self.tape.push(
            Op::BroadcastRows(self.idx),
            Tensor::from_parts(vec![m, r.cols()], data),
            "broadcast_rows",
        )
    }

    /// Repeats an `m×1` column `n` times.
    pub fn broadcast_cols(self, n: usize) -> Result<Self> {
        let c = self.value();
        if c.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                lhs: c.shape().to_vec(),
                rhs: vec![c.rows(), 1],
            });
        }
        let data = c.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        self.tape.push(
            Op::BroadcastCols(self.idx),
            Tensor::from_parts(vec![c.rows(), n], data),
            "broadcast_cols",
        )
    }

    /// Sum of all elements as a `1×1` scalar.
    pub fn sum(self) -> Result<Self> {
        let s: T = self.value().data().iter().copied().sum();
        self.tape.push(Op::SumAll(self.idx), Tensor::scalar(s), "sum")
    }

    /// Broadcasts a `1×1` scalar to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Self> {
        let v = self.value();
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        self.tape.push(
            Op::Expand(self.idx),
            Tensor::full(shape, v.item()),
            "expand",
        )
    }

    /// Column sums, `m×n → 1×n`.
    pub fn sum_rows(self) -> Result<Self> {
        let a = self.value();
        let n = a.cols();
        let mut out = vec![T::zero(); n];
        for chunk in a.data().chunks(n.max(1)) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o = *o + x;
            }
        }
        self.tape
            .push(Op::SumRows(self.idx), Tensor::from_parts(vec![1, n], out), "sum_rows")
    }

    /// Row sums, `m×n → m×1`.
    pub fn sum_cols(self) -> Result<Self> {
        let a = self.value();
        let n = a.cols().max(1);
        let out: Vec<T> = a.data().chunks(n).map(|c| c.iter().copied().sum()).collect();
        self.tape.push(
            Op::SumCols(self.idx),
            Tensor::from_parts(vec![a.rows(), 1], out),
            "sum_cols",
        )
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu(self.idx), "relu", |x| x.max(T::zero()))
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(Op::Tanh(self.idx), "tanh", |x| x.tanh())
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(Op::Sigmoid(self.idx), "sigmoid", |x| {
            T::one() / (T::one() + (-x).exp())
        })
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Op::Exp(self.idx), "exp", |x| x.exp())
    }

    pub fn log(self) -> Result<Self> {
        self.unary(Op::Log(self.idx), "log", |x| x.ln())
    }

    pub fn sqrt(self) -> Result<Self> {
        self.unary(Op::Sqrt(self.idx), "sqrt", |x| x.sqrt())
    }

    pub fn recip(self) -> Result<Self> {
        self.unary(Op::Recip(self.idx), "recip", |x| x.recip())
    }

    /// Numerically stable row-wise log-sum-exp, `m×n → m×1`.
    pub fn logsumexp_cols(self) -> Result<Self> {
        let a = self.value();
        let n = a.cols().max(1);
        let out: Vec<T> = a
            .data()
            .chunks(n)
            .map(|row| {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let s: T = row.iter().map(|&x| (x - mx).exp()).sum();
                mx + s.ln()
            })
            .collect();
        self.tape.push(
            Op::LogSumExpCols(self.idx),
            Tensor::from_parts(vec![a.rows(), 1], out),
            "logsumexp",
        )
    }

    /// Picks `self[i, idx[i]]` from every row, `m×n → m×1`.
    pub fn gather(self, idx: &[usize]) -> Result<Self> {
        let a = self.value();
        let n = a.cols();
        if idx.len() != a.rows() || idx.iter().any(|&j| j >= n) {
            return Err(Error::invalid(format!(
                "gather: {} indices (max {:?}) for a {}x{} matrix",
                idx.len(),
                idx.iter().max(),
                a.rows(),
                n
            )));
        }
        let out = idx.iter().enumerate().map(|(i, &j)| a.data()[i * n + j]).collect();
        self.tape.push(
            Op::Gather(self.idx, Arc::from(idx)),
            Tensor::from_parts(vec![a.rows(), 1], out),
            "gather",
        )
    }

    fn scatter(self, idx: Arc<[usize]>, n: usize) -> Result<Self> {
        let g = self.value();
        let mut out = vec![T::zero(); g.rows() * n];
        for (i, &j) in idx.iter().enumerate() {
            out[i * n + j] = g.data()[i];
        }
        self.tape.push(
            Op::Scatter(self.idx, idx),
            Tensor::from_parts(vec![g.rows(), n], out),
            "scatter",
        )
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn concat_cols(self, other: Self) -> Result<Self> {
        same_tape(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        if a.rows() != b.rows() {
            return Err(mismatch("concat_cols", &a, &b));
        }
        let (p, q) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.rows() * (p + q));
        for i in 0..a.rows() {
            data.extend_from_slice(a.row_slice(i));
            data.extend_from_slice(b.row_slice(i));
        }
        self.tape.push(
            Op::ConcatCols(self.idx, other.idx),
            Tensor::from_parts(vec![a.rows(), p + q], data),
            "concat_cols",
        )
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let a = self.value();
        if start + len > a.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {start}+{len} exceeds {} columns",
                a.cols()
            )));
        }
        let mut data = Vec::with_capacity(a.rows() * len);
        for i in 0..a.rows() {
            data.extend_from_slice(&a.row_slice(i)[start..start + len]);
        }
        self.tape.push(
            Op::SliceCols { a: self.idx, start },
            Tensor::from_parts(vec![a.rows(), len], data),
            "slice_cols",
        )
    }

    fn pad_cols(self, start: usize, total: usize) -> Result<Self> {
        let a = self.value();
        let len = a.cols();
        let mut data = vec![T::zero(); a.rows() * total];
        for i in 0..a.rows() {
            data[i * total + start..i * total + start + len].copy_from_slice(a.row_slice(i));
        }
        self.tape.push(
            Op::PadCols { a: self.idx, start },
            Tensor::from_parts(vec![a.rows(), total], data),
            "pad_cols",
        )
    }

    /// Treats `self` as a `V×e` table and returns the mean row of each bag.
    pub fn embed_bag(self, bags: Arc<Vec<Vec<usize>>>) -> Result<Self> {
        let table = self.value();
        let (v, e) = (table.rows(), table.cols());
        let mut out = vec![T::zero(); bags.len() * e];
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::Empty("embedding bag"));
            }
            let inv = T::one() / T::c(bag.len() as f64);
            let dst = &mut out[b * e..(b + 1) * e];
            for &tok in bag {
                if tok >= v {
                    return Err(Error::invalid(format!("token id {tok} outside table of {v}")));
                }
                for (o, &x) in dst.iter_mut().zip(table.row_slice(tok)) {
                    *o = *o + x * inv;
                }
            }
        }
        self.tape.push(
            Op::EmbedBag(self.idx, bags.clone()),
            Tensor::from_parts(vec![bags.len(), e], out),
            "embed_bag",
        )
    }

    fn bag_scatter(self, bags: Arc<Vec<Vec<usize>>>, vocab: usize) -> Result<Self> {
        let g = self.value();
        let e = g.cols();
        let mut out = vec![T::zero(); vocab * e];
        for (b, bag) in bags.iter().enumerate() {
            let inv = T::one() / T::c(bag.len() as f64);
            for &tok in bag {
                for (o, &x) in out[tok * e..(tok + 1) * e].iter_mut().zip(g.row_slice(b)) {
                    *o = *o + x * inv;
                }
            }
        }
        self.tape.push(
            Op::BagScatter(self.idx, bags),
            Tensor::from_parts(vec![vocab, e], out),
            "bag_scatter",
        )
    }

    /// Forward value replaced by `value`, gradient passed through unchanged
    /// (backward-pass identity approximation).
    pub fn straight_through(self, value: Tensor<T>) -> Result<Self> {
        let a = self.value();
        if a.shape() != value.shape() {
            return Err(mismatch("straight_through", &a, &value));
        }
        self.tape
            .push(Op::StraightThrough(self.idx), value, "straight_through")
    }

    // ---- composites ----

    pub fn mean(self) -> Result<Self> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    pub fn silu(self) -> Result<Self> {
        self.mul(self.sigmoid()?)
    }

    /// Row-wise squared norms, `m×n → m×1`.
    pub fn sq_norm_rows(self) -> Result<Self> {
        self.square()?.sum_cols()
    }

    /// Row-wise Euclidean norms, `m×n → m×1`; errors on a zero row.
    pub fn l2norm_rows(self) -> Result<Self> {
        let v = self.value();
        let n = v.cols().max(1);
        let min = v
            .data()
            .chunks(n)
            .map(|r| super::l2_norm(r).f64())
            .fold(f64::INFINITY, f64::min);
        if min < NORM_EPS {
            return Err(Error::DegenerateNorm {
                op: "l2norm",
                norm: min,
            });
        }
        self.sq_norm_rows()?.sqrt()
    }

    /// Euclidean norm of the whole tensor as a `1×1` scalar.
    pub fn l2norm(self) -> Result<Self> {
        let norm = super::l2_norm(self.value().data()).f64();
        if norm < NORM_EPS {
            return Err(Error::DegenerateNorm { op: "l2norm", norm });
        }
        self.square()?.sum()?.sqrt()
    }

    /// Divides row `i` by `col[i]`.
    pub fn div_col(self, col: Self) -> Result<Self> {
        self.mul_col(col.recip()?)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(self) -> Result<Self> {
        let norms = self.l2norm_rows()?;
        self.div_col(norms)
    }

    /// Row-wise cosine similarity, `m×1`. `other` is `m×n` or a `1×n` row
    /// compared against every row.
    pub fn cosine_rows(self, other: Self) -> Result<Self> {
        let m = self.rows();
        let other = if other.rows() == 1 && m != 1 {
            other.broadcast_rows(m)?
        } else {
            other
        };
        let na = self.l2norm_rows()?;
        let nb = other.l2norm_rows()?;
        let dots = self.mul(other)?.sum_cols()?;
        dots.mul(na.mul(nb)?.recip()?)
    }

    /// Row-wise cross-entropy `-log softmax(self)[label]`, `m×1`.
    pub fn cross_entropy_rows(self, labels: &[usize]) -> Result<Self> {
        let lse = self.logsumexp_cols()?;
        lse.sub(self.gather(labels)?)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Result<Self> {
        let n = self.cols();
        let lse = self.logsumexp_cols()?.broadcast_cols(n)?;
        self.sub(lse)
    }
}

/// Vector-Jacobian product of `op` given output `out` and its cotangent `g`.
/// Returns one optional contribution per op input.
pub(crate) fn vjp<'t, T: Scalar>(
    tape: &'t Tape<T>,
    op: &Op<T>,
    out: Var<'t, T>,
    g: Var<'t, T>,
) -> Result<[Option<Var<'t, T>>; 2]> {
    let var = |idx| Var { tape, idx };
    Ok(match op {
        Op::Leaf => [None, None],
        &Op::MatMul { a, b, ta, tb } => {
            let (a, b) = (var(a), var(b));
            let da = if ta {
                b.matmul_t(g, tb, true)?
            } else {
                g.matmul_t(b, false, !tb)?
            };
            let db = if tb {
                g.matmul_t(a, true, ta)?
            } else {
                a.matmul_t(g, !ta, false)?
            };
            [Some(da), Some(db)]
        }
        Op::Add(..) => [Some(g), Some(g)],
        Op::Sub(..) => [Some(g), Some(g.neg()?)],
        &Op::Mul(a, b) => [Some(g.mul(var(b))?), Some(g.mul(var(a))?)],
        Op::Neg(_) => [Some(g.neg()?), None],
        &Op::Scale(_, c) => [Some(g.scale(c.f64())?), None],
        Op::AddScalar(..) => [Some(g), None],
        Op::AddRow(..) => [Some(g), Some(g.sum_rows()?)],
        &Op::MulCol(a, c) => [
            Some(g.mul_col(var(c))?),
            Some(g.mul(var(a))?.sum_cols()?),
        ],
        Op::BroadcastRows(..) => [Some(g.sum_rows()?), None],
        Op::BroadcastCols(..) => [Some(g.sum_cols()?), None],
        &Op::SumAll(a) => [Some(g.expand(&var(a).shape())?), None],
        Op::Expand(..) => [Some(g.sum()?), None],
        &Op::SumRows(a) => [Some(g.broadcast_rows(var(a).rows())?), None],
        &Op::SumCols(a) => [Some(g.broadcast_cols(var(a).cols())?), None],
        &Op::Relu(a) => {
            let mask = var(a)
                .value()
                .map(|x| if x > T::zero() { T::one() } else { T::zero() });
            [Some(g.mul(tape.constant(mask))?), None]
        }
        Op::Tanh(_) => {
            let d = out.square()?.neg()?.add_scalar(1.0)?;
            [Some(g.mul(d)?), None]
        }
        Op::Sigmoid(_) => {
            let d = out.mul(out.neg()?.add_scalar(1.0)?)?;
            [Some(g.mul(d)?), None]
        }
        Op::Exp(_) => [Some(g.mul(out)?), None],
        &Op::Log(a) => [Some(g.mul(var(a).recip()?)?), None],
        Op::Sqrt(_) => [Some(g.mul(out.recip()?)?.scale(0.5)?), None],
        Op::Recip(_) => [Some(g.mul(out.square()?)?.neg()?), None],
        &Op::LogSumExpCols(a) => {
            let a = var(a);
            let n = a.cols();
            let softmax = a.sub(out.broadcast_cols(n)?)?.exp()?;
            [Some(softmax.mul(g.broadcast_cols(n)?)?), None]
        }
        &Op::Gather(a, ref idx) => [Some(g.scatter(idx.clone(), var(a).cols())?), None],
        Op::Scatter(_, idx) => [Some(g.gather(idx)?), None],
        &Op::ConcatCols(a, b) => {
            let p = var(a).cols();
            let q = var(b).cols();
            [Some(g.slice_cols(0, p)?), Some(g.slice_cols(p, q)?)]
        }
        &Op::SliceCols { a, start, .. } => [Some(g.pad_cols(start, var(a).cols())?), None],
        &Op::PadCols { a, start, .. } => [Some(g.slice_cols(start, var(a).cols())?), None],
        &Op::EmbedBag(a, ref bags) => [Some(g.bag_scatter(bags.clone(), var(a).rows())?), None],
        Op::BagScatter(_, bags) => [Some(g.embed_bag(bags.clone())?), None],
        Op::StraightThrough(_) => [Some(g), None],
    })
}
