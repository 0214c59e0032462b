//! Tape-based reverse-mode differentiation over the op set the model uses.
//!
//! Every op appends one node to the tape; [`Tape::backward`] walks the node
//! list in exact reverse order and accumulates adjoints. Values are shared
//! copy-on-write, so placing a large parameter on the tape does not copy it.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, transpose_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Kron(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    WeightedRowSum(Var, Arc<Vec<T>>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Arc<Vec<usize>> },
    Pick { x: Var, idx: Arc<Vec<usize>> },
    SqDist(Var, Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed ops for one forward pass.
///
/// A tape is confined to one thread. It supports exactly one backward pass;
/// call [`Tape::reset_grads`] before running backward again.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Vec<T>>>>>,
}

/// Batch layout of a rank-2 or rank-3 operand of a batched matmul.
#[derive(Clone, Copy)]
struct MatLayout {
    batch: usize,
    rows: usize,
    cols: usize,
}

fn mat_layout(shape: &[usize]) -> Option<MatLayout> {
    match *shape {
        [rows, cols] => Some(MatLayout { batch: 1, rows, cols }),
        [batch, rows, cols] => Some(MatLayout { batch, rows, cols }),
        _ => None,
    }
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiated iff the tensor requires grad.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Single element of a one-element value.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn with_values<R>(&self, f: impl FnOnce(&[Node<T>]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.with_values(|n| n[x.0].value.map(f));
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.with_values(|n| n[x.0].value.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite input to {what}")))
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let (ta, tb) = (&n[a.0].value, &n[b.0].value);
            let err = || shape_err!("matmul dimension mismatch: {:?} x {:?}", ta.shape(), tb.shape());
            let la = mat_layout(ta.shape()).ok_or_else(err)?;
            let lb = mat_layout(tb.shape()).ok_or_else(err)?;
            if la.cols != lb.rows || (la.batch != lb.batch && la.batch != 1 && lb.batch != 1) {
                return Err(err());
            }
            if ta.rank() == 3 && tb.rank() == 2 {
                // Flatten the batch into rows.
                let out = gemm(ta.data(), tb.data(), la.batch * la.rows, la.cols, lb.cols);
                return Tensor::new(&[la.batch, la.rows, lb.cols], out);
            }
            let batch = la.batch.max(lb.batch);
            let (sa, sb) = (la.rows * la.cols, lb.rows * lb.cols);
            let mut out = Vec::with_capacity(batch * la.rows * lb.cols);
            for i in 0..batch {
                let ai = if la.batch == 1 { 0 } else { i };
                let bi = if lb.batch == 1 { 0 } else { i };
                out.extend(gemm(
                    &ta.data()[ai * sa..(ai + 1) * sa],
                    &tb.data()[bi * sb..(bi + 1) * sb],
                    la.rows,
                    la.cols,
                    lb.cols,
                ));
            }
            if ta.rank() == 2 && tb.rank() == 2 {
                Tensor::new(&[la.rows, lb.cols], out)
            } else {
                Tensor::new(&[batch, la.rows, lb.cols], out)
            }
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = self.with_values(|n| n[x.0].value.transpose())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_values(|n| n[x.0].value.reshape(shape))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, name: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let (ta, tb) = (&n[a.0].value, &n[b.0].value);
            if ta.shape() != tb.shape() {
                return Err(shape_err!("{name}: shapes {:?} and {:?} differ", ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x + b` with `b` broadcast over every leading index of `x`.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let (tx, tb) = (&n[x.0].value, &n[b.0].value);
            let w = tx.last_dim();
            if tb.len() != w {
                return Err(shape_err!("bias {:?} does not match last axis of {:?}", tb.shape(), tx.shape()));
            }
            let data = tx
                .data()
                .chunks(w)
                .flat_map(|row| row.iter().zip(tb.data()).map(|(&a, &c)| a + c))
                .collect();
            Tensor::new(tx.shape(), data)
        })?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let ts = &n[s.0].value;
            if ts.len() != 1 {
                return Err(shape_err!("mul_scalar needs a one-element factor, got {:?}", ts.shape()));
            }
            let c = ts.data()[0];
            Ok(n[x.0].value.map(|v| v * c))
        })?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulScalar(x, s), rg))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_const(&self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddConst(x), |v| v + c)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// ReLU; the subgradient at 0 is 0.
    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), T::tanh)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), T::exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        if self.with_values(|n| n[x.0].value.data().iter().any(|&v| !(v > T::zero()))) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        Ok(self.unary(x, Op::Log(x), T::ln))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), num_traits::Float::abs)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis where entries with `mask == false` get
    /// exactly zero weight. A fully masked row yields all zeros.
    pub fn softmax_masked(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check_finite(x, "softmax")?;
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let tx = &n[x.0].value;
            if let Some(m) = mask {
                if m.len() != tx.len() {
                    return Err(shape_err!("mask of length {} for {:?}", m.len(), tx.shape()));
                }
            }
            let w = tx.last_dim();
            let mut out = vec![T::zero(); tx.len()];
            for (r, (xs, ys)) in tx.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
                let keep = |j: usize| mask.map_or(true, |m| m[r * w + j]);
                let mx = (0..w).filter(|&j| keep(j)).map(|j| xs[j]).fold(T::neg_infinity(), T::max);
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut s = T::zero();
                for j in 0..w {
                    if keep(j) {
                        ys[j] = (xs[j] - mx).exp();
                        s += ys[j];
                    }
                }
                for y in ys.iter_mut() {
                    *y /= s;
                }
            }
            Tensor::new(tx.shape(), out)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax")?;
        let value = self.with_values(|n| {
            let tx = &n[x.0].value;
            let w = tx.last_dim();
            let mut out = Vec::with_capacity(tx.len());
            for xs in tx.data().chunks(w) {
                let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + xs.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                out.extend(xs.iter().map(|&v| v - lse));
            }
            Tensor::new(tx.shape(), out)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Layer normalization over the last axis with `eps` inside the square root.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, xhat, rstd) = self.with_values(|n| -> Result<_> {
            let (tx, tg, tb) = (&n[x.0].value, &n[gain.0].value, &n[bias.0].value);
            let w = tx.last_dim();
            if w < 2 {
                return Err(shape_err!("layer_norm needs at least 2 features, got {:?}", tx.shape()));
            }
            if tg.len() != w || tb.len() != w {
                return Err(shape_err!(
                    "layer_norm affine params {:?}/{:?} for input {:?}",
                    tg.shape(),
                    tb.shape(),
                    tx.shape()
                ));
            }
            let nw = T::from_usize_lossy(w);
            let mut xhat = Vec::with_capacity(tx.len());
            let mut rstd = Vec::with_capacity(tx.len() / w);
            let mut out = Vec::with_capacity(tx.len());
            for xs in tx.data().chunks(w) {
                let mean = xs.iter().copied().sum::<T>() / nw;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nw;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in xs.iter().enumerate() {
                    let h = (v - mean) * r;
                    xhat.push(h);
                    out.push(h * tg.data()[j] + tb.data()[j]);
                }
            }
            Ok((Tensor::new(tx.shape(), out)?, xhat, rstd))
        })?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn kron(&self, p: Var, q: Var) -> Result<Var> {
        let value = self.with_values(|n| crate::tensor::kron(&n[p.0].value, &n[q.0].value))?;
        let rg = self.rg(&[p, q]);
        Ok(self.push(value, Op::Kron(p, q), rg))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = self.with_values(|n| Tensor::scalar(n[x.0].value.data().iter().copied().sum()));
        let rg = self.rg(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let value = self.with_values(|n| {
            let t = &n[x.0].value;
            Tensor::scalar(t.data().iter().copied().sum::<T>() / T::from_usize_lossy(t.len()))
        });
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// `out[j] = Σ_i w[i]·x[i, j]` for rank-2 `x`, giving shape `[1, n]`.
    pub fn weighted_row_sum(&self, x: Var, weights: Vec<T>) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let tx = &n[x.0].value;
            let (m, w) = tx.dims2()?;
            if weights.len() != m {
                return Err(shape_err!("{} row weights for {:?}", weights.len(), tx.shape()));
            }
            let mut out = vec![T::zero(); w];
            for (row, &c) in tx.data().chunks(w).zip(&weights) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += c * v;
                }
            }
            Tensor::new(&[1, w], out)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::WeightedRowSum(x, Arc::new(weights)), rg))
    }

    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let m = self.with_values(|n| n[x.0].value.dims2())?.0;
        let w = T::one() / T::from_usize_lossy(m);
        self.weighted_row_sum(x, vec![w; m])
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let tx = &n[x.0].value;
            let (m, w) = tx.dims2()?;
            if tx.rank() != 2 || start + len > w {
                return Err(shape_err!("column slice {start}..{} of {:?}", start + len, tx.shape()));
            }
            let data = tx.data().chunks(w).flat_map(|r| r[start..start + len].iter().copied()).collect();
            Tensor::new(&[m, len], data)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let tx = &n[x.0].value;
            let (m, w) = tx.dims2()?;
            if tx.rank() != 2 || start + len > m || len == 0 {
                return Err(shape_err!("row slice {start}..{} of {:?}", start + len, tx.shape()));
            }
            Tensor::new(&[len, w], tx.data()[start * w..(start + len) * w].to_vec())
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let mats: Vec<&Tensor<T>> = parts.iter().map(|v| &n[v.0].value).collect();
            let m = mats.first().ok_or_else(|| shape_err!("concat of nothing"))?.dims2()?.0;
            let mut widths = Vec::with_capacity(mats.len());
            for t in &mats {
                let (mi, wi) = t.dims2()?;
                if t.rank() != 2 || mi != m {
                    return Err(shape_err!("concat_cols row mismatch at {:?}", t.shape()));
                }
                widths.push(wi);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for (t, &w) in mats.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(&[m, total], data)
        })?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let mats: Vec<&Tensor<T>> = parts.iter().map(|v| &n[v.0].value).collect();
            let w = mats.first().ok_or_else(|| shape_err!("concat of nothing"))?.dims2()?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for t in &mats {
                let (mi, wi) = t.dims2()?;
                if wi != w {
                    return Err(shape_err!("concat_rows width mismatch at {:?}", t.shape()));
                }
                rows += mi;
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[rows, w], data)
        })?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row lookup `table[ids[i]]`, giving `[ids.len(), d]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let tt = &n[table.0].value;
            let (v, d) = tt.dims2()?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(shape_err!("row id {id} out of range for table {:?}", tt.shape()));
                }
                data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(&[ids.len(), d], data)
        })?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Gather { table, ids: Arc::new(ids.to_vec()) }, rg))
    }

    /// Picks elements by flat row-major index into a vector.
    pub fn pick(&self, x: Var, flat: &[usize]) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let tx = &n[x.0].value;
            if flat.is_empty() {
                return Err(shape_err!("pick of no indices"));
            }
            let mut data = Vec::with_capacity(flat.len());
            for &i in flat {
                data.push(*tx.data().get(i).ok_or_else(|| shape_err!("pick index {i} out of range"))?);
            }
            Tensor::new(&[flat.len()], data)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Pick { x, idx: Arc::new(flat.to_vec()) }, rg))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_values(|n| -> Result<Tensor<T>> {
            let (ta, tb) = (&n[a.0].value, &n[b.0].value);
            let (m, d) = ta.dims2()?;
            let (p, d2) = tb.dims2()?;
            if d != d2 {
                return Err(shape_err!("sq_dist width mismatch: {:?} vs {:?}", ta.shape(), tb.shape()));
            }
            let mut out = Vec::with_capacity(m * p);
            for ra in ta.data().chunks(d) {
                for rb in tb.data().chunks(d) {
                    out.push(ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum());
                }
            }
            Tensor::new(&[m, p], out)
        })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::SqDist(a, b), rg))
    }

    /// Runs reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::Autodiff(
                "backward already ran on this tape; reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff("loss is detached from every differentiable leaf".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in vjp(&nodes, node, &g)? {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.as_ref()?.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("grad matches value shape"))
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }
}

fn val<T: Scalar>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

/// Vector-Jacobian products of one node with respect to its inputs.
fn vjp<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
    let out = &node.value;
    let res = match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let la = mat_layout(ta.shape()).expect("checked in forward");
            let lb = mat_layout(tb.shape()).expect("checked in forward");
            let (m, k, n) = (la.rows, la.cols, lb.cols);
            let batch = la.batch.max(lb.batch);
            let mut ga = vec![T::zero(); ta.len()];
            let mut gb = vec![T::zero(); tb.len()];
            if ta.rank() == 3 && tb.rank() == 2 {
                let rows = la.batch * m;
                ga = gemm(g, &transpose_raw(tb.data(), 1, k, n), rows, n, k);
                gb = gemm(&transpose_raw(ta.data(), 1, rows, k), g, k, rows, n);
            } else {
                for i in 0..batch {
                    let ai = if la.batch == 1 { 0 } else { i };
                    let bi = if lb.batch == 1 { 0 } else { i };
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let a_i = &ta.data()[ai * m * k..(ai + 1) * m * k];
                    let b_i = &tb.data()[bi * k * n..(bi + 1) * k * n];
                    let da = gemm(gi, &transpose_raw(b_i, 1, k, n), m, n, k);
                    let db = gemm(&transpose_raw(a_i, 1, m, k), gi, k, m, n);
                    add_into(&mut ga[ai * m * k..(ai + 1) * m * k], &da);
                    add_into(&mut gb[bi * k * n..(bi + 1) * k * n], &db);
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(x) => {
            let s = out.shape();
            let (batch, m, n) = match *s {
                [m, n] => (1, m, n),
                [b, m, n] => (b, m, n),
                _ => unreachable!(),
            };
            vec![(*x, transpose_raw(g, batch, m, n))]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
        Op::Mul(a, b) => {
            let (ta, tb) = (val(nodes, *a).data(), val(nodes, *b).data());
            vec![
                (*a, g.iter().zip(tb).map(|(&gv, &y)| gv * y).collect()),
                (*b, g.iter().zip(ta).map(|(&gv, &x)| gv * x).collect()),
            ]
        }
        Op::AddBias(x, b) => {
            let w = out.last_dim();
            let mut gb = vec![T::zero(); w];
            for row in g.chunks(w) {
                add_into(&mut gb, row);
            }
            vec![(*x, g.to_vec()), (*b, gb)]
        }
        Op::MulScalar(x, s) => {
            let c = val(nodes, *s).data()[0];
            let tx = val(nodes, *x).data();
            let gs: T = g.iter().zip(tx).map(|(&gv, &v)| gv * v).sum();
            vec![(*x, g.iter().map(|&gv| gv * c).collect()), (*s, vec![gs])]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|&gv| gv * *c).collect())],
        Op::AddConst(x) => vec![(*x, g.to_vec())],
        Op::Relu(x) => {
            let tx = val(nodes, *x).data();
            vec![(*x, g.iter().zip(tx).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect())]
        }
        Op::Tanh(x) => vec![(*x, g.iter().zip(out.data()).map(|(&gv, &y)| gv * (T::one() - y * y)).collect())],
        Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect())],
        Op::Log(x) => {
            let tx = val(nodes, *x).data();
            vec![(*x, g.iter().zip(tx).map(|(&gv, &v)| gv / v).collect())]
        }
        Op::Abs(x) => {
            let tx = val(nodes, *x).data();
            vec![(*x, g.iter().zip(tx).map(|(&gv, &v)| {
                if v > T::zero() { gv } else if v < T::zero() { -gv } else { T::zero() }
            }).collect())]
        }
        Op::Clamp(x, lo, hi) => {
            let tx = val(nodes, *x).data();
            vec![(*x, g.iter().zip(tx).map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { T::zero() }).collect())]
        }
        Op::Softmax(x) => {
            let w = out.last_dim();
            let mut gx = Vec::with_capacity(g.len());
            for (gs, ys) in g.chunks(w).zip(out.data().chunks(w)) {
                let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                gx.extend(gs.iter().zip(ys).map(|(&gv, &y)| y * (gv - dot)));
            }
            vec![(*x, gx)]
        }
        Op::LogSoftmax(x) => {
            let w = out.last_dim();
            let mut gx = Vec::with_capacity(g.len());
            for (gs, ys) in g.chunks(w).zip(out.data().chunks(w)) {
                let total: T = gs.iter().copied().sum();
                gx.extend(gs.iter().zip(ys).map(|(&gv, &y)| gv - y.exp() * total));
            }
            vec![(*x, gx)]
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let w = out.last_dim();
            let nw = T::from_usize_lossy(w);
            let tg = val(nodes, *gain).data();
            let mut gx = Vec::with_capacity(g.len());
            let mut ggain = vec![T::zero(); w];
            let mut gbias = vec![T::zero(); w];
            for ((gs, hs), &r) in g.chunks(w).zip(xhat.chunks(w)).zip(rstd) {
                let mut sum_d = T::zero();
                let mut sum_dh = T::zero();
                for j in 0..w {
                    let d = gs[j] * tg[j];
                    sum_d += d;
                    sum_dh += d * hs[j];
                    ggain[j] += gs[j] * hs[j];
                    gbias[j] += gs[j];
                }
                for j in 0..w {
                    let d = gs[j] * tg[j];
                    gx.push(r / nw * (nw * d - sum_d - hs[j] * sum_dh));
                }
            }
            vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
        }
        Op::Kron(p, q) => {
            let (tp, tq) = (val(nodes, *p), val(nodes, *q));
            let (a, b) = tp.dims2()?;
            let (c, d) = tq.dims2()?;
            let cols = b * d;
            let mut gp = vec![T::zero(); a * b];
            let mut gq = vec![T::zero(); c * d];
            for i in 0..a {
                for j in 0..b {
                    let pv = tp.data()[i * b + j];
                    for k in 0..c {
                        for l in 0..d {
                            let gv = g[(i * c + k) * cols + j * d + l];
                            gp[i * b + j] += gv * tq.data()[k * d + l];
                            gq[k * d + l] += gv * pv;
                        }
                    }
                }
            }
            vec![(*p, gp), (*q, gq)]
        }
        Op::SumAll(x) => vec![(*x, vec![g[0]; val(nodes, *x).len()])],
        Op::MeanAll(x) => {
            let n = val(nodes, *x).len();
            vec![(*x, vec![g[0] / T::from_usize_lossy(n); n])]
        }
        Op::WeightedRowSum(x, weights) => {
            let w = out.last_dim();
            let gx = weights.iter().flat_map(|&c| g[..w].iter().map(move |&gv| gv * c)).collect();
            vec![(*x, gx)]
        }
        Op::SliceCols { x, start } => {
            let tx = val(nodes, *x);
            let (_, w) = tx.dims2()?;
            let len = out.last_dim();
            let mut gx = vec![T::zero(); tx.len()];
            for (dst, src) in gx.chunks_mut(w).zip(g.chunks(len)) {
                dst[*start..*start + len].copy_from_slice(src);
            }
            vec![(*x, gx)]
        }
        Op::SliceRows { x, start } => {
            let tx = val(nodes, *x);
            let w = tx.last_dim();
            let mut gx = vec![T::zero(); tx.len()];
            gx[start * w..start * w + g.len()].copy_from_slice(g);
            vec![(*x, gx)]
        }
        Op::ConcatCols(parts) => {
            let total = out.last_dim();
            let mut off = 0;
            let mut res = Vec::with_capacity(parts.len());
            for v in parts {
                let w = val(nodes, *v).last_dim();
                let gv = g.chunks(total).flat_map(|r| r[off..off + w].iter().copied()).collect();
                res.push((*v, gv));
                off += w;
            }
            res
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            let mut res = Vec::with_capacity(parts.len());
            for v in parts {
                let n = val(nodes, *v).len();
                res.push((*v, g[off..off + n].to_vec()));
                off += n;
            }
            res
        }
        Op::Gather { table, ids } => {
            let tt = val(nodes, *table);
            let d = tt.last_dim();
            let mut gt = vec![T::zero(); tt.len()];
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
            }
            vec![(*table, gt)]
        }
        Op::Pick { x, idx } => {
            let mut gx = vec![T::zero(); val(nodes, *x).len()];
            for (k, &i) in idx.iter().enumerate() {
                gx[i] += g[k];
            }
            vec![(*x, gx)]
        }
        Op::SqDist(a, b) => {
            let (ta, tb) = (val(nodes, *a), val(nodes, *b));
            let (m, d) = ta.dims2()?;
            let (p, _) = tb.dims2()?;
            let mut ga = vec![T::zero(); ta.len()];
            let mut gb = vec![T::zero(); tb.len()];
            let two = T::lit(2.0);
            for i in 0..m {
                for j in 0..p {
                    let c = two * g[i * p + j];
                    for k in 0..d {
                        let diff = ta.data()[i * d + k] - tb.data()[j * d + k];
                        ga[i * d + k] += c * diff;
                        gb[j * d + k] -= c * diff;
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
    };
    Ok(res)
}
