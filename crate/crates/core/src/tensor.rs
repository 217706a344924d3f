//! Dense row-major tensors. Image batches are laid out NCHW.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    /// `(n, c, h, w)`; panics on tensors of other rank, which is always a
    /// programming error inside the layer code.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn dims2(&self) -> (usize, usize) {
        match self.shape[..] {
            [r, c] => (r, c),
            _ => panic!("expected a rank-2 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        self.sum() / S::of(self.data.len() as f64)
    }

    pub fn mean_abs(&self) -> S {
        if self.data.is_empty() {
            return S::zero();
        }
        self.data.iter().map(|v| v.abs()).sum::<S>() / S::of(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Items `start..start+len` along the leading (batch) axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self {
            shape,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// One batch item as a slice.
    pub fn item(&self, i: usize) -> &[S] {
        let per: usize = self.shape[1..].iter().product();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [S] {
        let per: usize = self.shape[1..].iter().product();
        &mut self.data[i * per..(i + 1) * per]
    }

    /// Stacks equally-shaped items along a new leading axis.
    pub fn stack(items: &[&[S]], item_shape: &[usize]) -> Result<Self> {
        let per: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(per * items.len());
        for it in items {
            if it.len() != per {
                return Err(Error::Shape(format!(
                    "stack item has {} elements, expected {per}",
                    it.len()
                )));
            }
            data.extend_from_slice(it);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        Ok(Self { shape, data })
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        let (n, c1, h, w) = self.dims4();
        let (n2, c2, h2, w2) = other.dims4();
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::Shape(format!(
                "cannot concatenate channels of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (c1 + c2) * plane);
        for i in 0..n {
            data.extend_from_slice(self.item(i));
            data.extend_from_slice(other.item(i));
        }
        Ok(Self {
            shape: vec![n, c1 + c2, h, w],
            data,
        })
    }

    /// Inverse of [`concat_channels`](Self::concat_channels): the first
    /// `c` channels of every item.
    pub fn leading_channels(&self, c: usize) -> Self {
        let (n, _, h, w) = self.dims4();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for i in 0..n {
            data.extend_from_slice(&self.item(i)[..c * plane]);
        }
        Self {
            shape: vec![n, c, h, w],
            data,
        }
    }

    /// Per-row argmax of a rank-2 tensor; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let (rows, cols) = self.dims2();
        (0..rows)
            .map(|r| argmax(&self.data[r * cols..(r + 1) * cols]))
            .collect()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

/// Index of the maximum; the first maximum wins on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a `(rows, cols)` logits tensor.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (rows, cols) = logits.dims2();
    let mut out = logits.clone();
    for r in 0..rows {
        let row = &mut out.data[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Backward of [`softmax_rows`]: given the softmax output `p` and upstream
/// gradient `dp`, returns the gradient with respect to the logits.
pub fn softmax_rows_backward<S: Scalar>(p: &Tensor<S>, dp: &Tensor<S>) -> Tensor<S> {
    let (rows, cols) = p.dims2();
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let pr = p.row(r);
        let dr = dp.row(r);
        let dot: S = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        let o = &mut out.data[r * cols..(r + 1) * cols];
        for j in 0..cols {
            o[j] = pr[j] * (dr[j] - dot);
        }
    }
    out
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
