//! Dense row-major tensors and the eager kernels the autodiff tape is built on.
//!
//! Binary operations broadcast numpy-style with trailing-axis alignment: shapes
//! are right-aligned and an extent of 1 stretches to match the other operand.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: input outside the domain of the operation")]
    Domain { op: &'static str },
    #[error("{op}: reduction over an empty axis")]
    EmptyReduction { op: &'static str },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Dense multidimensional array stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &extent) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= extent;
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from row slices. Panics if rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let strides = row_major_strides(&self.shape);
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Elementwise `self += other` for identical shapes.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: T) {
        for x in &mut self.data {
            *x *= c;
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    /// Selects rows (first-axis slices) by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(TensorError::InvalidAxis {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let n = self.shape[0];
        let width = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: n,
                });
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Self { shape, data })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }
}

/// Broadcast shape of two operands under trailing-axis alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; stretched axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, passing the offsets
/// obtained from each stride set.
fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        f(oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Offset pairs `(ia, ib)` for every element of the broadcast result, in order.
pub(crate) fn broadcast_pairs(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(numel(out));
    if a == out && b == out {
        pairs.extend((0..numel(out)).map(|i| (i, i)));
        return pairs;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    for_each_offset2(out, &sa, &sb, |ia, ib| pairs.push((ia, ib)));
    pairs
}

pub(crate) fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })?;
    let data = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else {
        broadcast_pairs(&a.shape, &b.shape, &out)
            .into_iter()
            .map(|(ia, ib)| f(a.data[ia], b.data[ib]))
            .collect()
    };
    Tensor::new(out, data)
}

/// Sums a gradient of the broadcast shape back down to `target` shape.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target);
    let st = broadcast_strides(target, &grad.shape);
    let sg = row_major_strides(&grad.shape);
    for_each_offset2(&grad.shape, &sg, &st, |ig, it| {
        out.data[it] += grad.data[ig]
    });
    out
}

/// Normalizes and validates a set of reduction axes.
pub(crate) fn check_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &axis in &sorted {
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::EmptyReduction { op });
        }
    }
    Ok(sorted)
}

/// Output shape of a reduction and the strides mapping each input element to
/// its output slot.
pub(crate) fn reduction_layout(
    shape: &[usize],
    axes: &[usize],
    keepdim: bool,
) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(d, &e)| if axes.contains(&d) { 1 } else { e })
        .collect();
    let kept_strides = row_major_strides(&kept);
    let map: Vec<usize> = (0..shape.len())
        .map(|d| {
            if axes.contains(&d) {
                0
            } else {
                kept_strides[d]
            }
        })
        .collect();
    let out = if keepdim {
        kept
    } else {
        shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &e)| e)
            .collect()
    };
    (out, map)
}

/// For every input element (row-major), the offset of its reduction slot.
pub(crate) fn reduction_offsets(shape: &[usize], map: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let mut offs = Vec::with_capacity(numel(shape));
    for_each_offset2(shape, &own, map, |_, io| offs.push(io));
    offs
}

pub(crate) fn reduce_sum<T: Scalar>(
    a: &Tensor<T>,
    axes: &[usize],
    keepdim: bool,
) -> Result<Tensor<T>> {
    let axes = check_axes("sum", &a.shape, axes)?;
    let (out_shape, map) = reduction_layout(&a.shape, &axes, keepdim);
    let mut out = Tensor::zeros(&out_shape);
    for (i, o) in reduction_offsets(&a.shape, &map).into_iter().enumerate() {
        out.data[o] += a.data[i];
    }
    Ok(out)
}

pub(crate) fn reduce_max<T: Scalar>(
    a: &Tensor<T>,
    axes: &[usize],
    keepdim: bool,
) -> Result<Tensor<T>> {
    let axes = check_axes("max", &a.shape, axes)?;
    let (out_shape, map) = reduction_layout(&a.shape, &axes, keepdim);
    let mut out = Tensor::full(&out_shape, T::neg_infinity());
    for (i, o) in reduction_offsets(&a.shape, &map).into_iter().enumerate() {
        if a.data[i] > out.data[o] {
            out.data[o] = a.data[i];
        }
    }
    Ok(out)
}

/// Max-shifted log-sum-exp along one axis.
pub(crate) fn logsumexp<T: Scalar>(a: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    let axes = check_axes("logsumexp", &a.shape, &[axis])?;
    let (out_shape, map) = reduction_layout(&a.shape, &axes, keepdim);
    let offs = reduction_offsets(&a.shape, &map);
    let mut peak = Tensor::full(&out_shape, T::neg_infinity());
    for (i, &o) in offs.iter().enumerate() {
        if a.data[i] > peak.data[o] {
            peak.data[o] = a.data[i];
        }
    }
    let mut acc: Tensor<T> = Tensor::zeros(&out_shape);
    for (i, &o) in offs.iter().enumerate() {
        acc.data[o] += (a.data[i] - peak.data[o]).exp();
    }
    for (s, &m) in acc.data.iter_mut().zip(&peak.data) {
        *s = m + s.ln();
    }
    Ok(acc)
}
