//! Dense row-major tensors of rank 1 to 3 and the raw kernels behind them.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 3;
const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

/// Dense tensor value. Data is shared copy-on-write, so clones are cheap.
#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(shape_err!("rank must be 1..={MAX_RANK}, got shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self::new(shape, vec![T::zero(); n]).expect("valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self::new(shape, vec![v; n]).expect("valid shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[1], vec![v]).expect("scalar shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::new(&[n, n], data).expect("square shape")
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector shape")
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(&[m, n], rows.iter().flatten().copied().collect())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Rows and columns of a rank-2 tensor; a rank-1 tensor is one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err!("expected rank 1 or 2, got {s:?}")),
        }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        self.data[off]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            &self.shape,
            self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        )
        .expect("same shape")
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g * weight` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[T], weight: T) -> Result<()> {
        if g.len() != self.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor {:?}",
                g.len(),
                self.shape
            ));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x * weight;
        }
        Ok(())
    }

    /// Transpose of the last two axes (rank 2 or 3).
    pub fn transpose(&self) -> Result<Self> {
        match self.shape.as_slice() {
            [m, n] => Ok(Self::new(&[*n, *m], transpose_raw(&self.data, 1, *m, *n))?),
            [b, m, n] => Ok(Self::new(&[*b, *n, *m], transpose_raw(&self.data, *b, *m, *n))?),
            s => Err(shape_err!("transpose needs rank 2 or 3, got {s:?}")),
        }
    }

    /// Writes the little-endian `TNSR` encoding: magic, u32 rank, u64 dims,
    /// f64 payload in row-major order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * 8);
        for x in self.data.iter() {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.rank() + 8 * self.len());
        self.write_to(&mut out).expect("write to vec");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let rank = u32::from_le_bytes(u32b) as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut u64b = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut u64b)?;
            shape.push(u64::from_le_bytes(u64b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Self::new(&shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let t = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor", cur.len())));
        }
        Ok(t)
    }
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for b in 0..batch {
        let src = &a[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

const PAR_THRESHOLD: usize = 1 << 15;

/// `c = a · b` with `a` m×k and `b` k×n, all row-major. Rows are split across
/// threads for large products; each output row is always summed in the same
/// order, so results do not depend on the thread count.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// Kronecker product of two row-major matrices (a×b) ⊗ (c×d).
pub(crate) fn kron_raw<T: Scalar>(
    p: &[T],
    (a, b): (usize, usize),
    q: &[T],
    (c, d): (usize, usize),
) -> Vec<T> {
    let cols = b * d;
    let mut out = vec![T::zero(); a * c * cols];
    for i in 0..a {
        for j in 0..b {
            let pv = p[i * b + j];
            for k in 0..c {
                for l in 0..d {
                    out[(i * c + k) * cols + j * d + l] = pv * q[k * d + l];
                }
            }
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(shape_err!(
            "matmul dimension mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Tensor::new(&[m, n], gemm(a.data(), b.data(), m, k, n))
}

pub fn kron<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<Tensor<T>> {
    if p.rank() != 2 || q.rank() != 2 {
        return Err(shape_err!(
            "kron needs two rank-2 tensors, got {:?} and {:?}",
            p.shape(),
            q.shape()
        ));
    }
    let (a, b) = p.dims2()?;
    let (c, d) = q.dims2()?;
    Tensor::new(&[a * c, b * d], kron_raw(p.data(), (a, b), q.data(), (c, d)))
}
