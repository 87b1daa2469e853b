//! Dense row-major tensors of `f64` used throughout the crate.
//!
//! Only ranks 1 and 2 appear in practice (vectors, matrices, and `[1]` for
//! scalars); shapes with a zero dimension are rejected at construction so
//! every tensor holds at least one element.

use std::fmt;

/// Construction or shape errors for [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// `shape` does not multiply out to the number of elements supplied.
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    /// A dimension of size zero was requested.
    ZeroDim { shape: Vec<usize> },
    /// Rows of differing lengths were supplied to [`Tensor::from_rows`].
    RaggedRows { row: usize, expected: usize, got: usize },
    /// No rows were supplied where at least one is required.
    Empty,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, len } => {
                write!(f, "shape {shape:?} does not match {len} data elements")
            }
            TensorError::ZeroDim { shape } => {
                write!(f, "shape {shape:?} contains a zero dimension")
            }
            TensorError::RaggedRows { row, expected, got } => {
                write!(f, "row {row} has {got} elements, expected {expected}")
            }
            TensorError::Empty => write!(f, "at least one row is required"),
        }
    }
}

impl std::error::Error for TensorError {}

/// A dense row-major tensor. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` multiplies out to `data.len()`
    /// and contains no zero dimension.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) || shape.is_empty() {
            return Err(TensorError::ZeroDim { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(values: &[f64]) -> Result<Self, TensorError> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equally sized rows into an `[n, m]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let first = rows.first().ok_or(TensorError::Empty)?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(TensorError::RaggedRows { row: i, expected: cols, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The sole element of a scalar-shaped tensor.
    ///
    /// Panics if the tensor holds more than one element; callers validate
    /// scalar-ness through the tape before extracting.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Naive `[a, b] x [b, c]` matrix product; shapes are validated by callers.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = other.shape[1];
        debug_assert_eq!(k, other.shape[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * m..(p + 1) * m];
                let dst = &mut out[i * m..(i + 1) * m];
                for (o, &b) in dst.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Maximum element and its flat index; ties resolve to the lowest index.
    pub fn max_with_index(&self) -> (f64, usize) {
        let mut best = self.data[0];
        let mut idx = 0;
        for (i, &x) in self.data.iter().enumerate().skip(1) {
            if x > best {
                best = x;
                idx = i;
            }
        }
        (best, idx)
    }

    /// Sums each row of an `[n, m]` tensor into an `[n, 1]` column.
    pub fn row_sums(&self) -> Tensor {
        let (n, m) = (self.shape[0], self.shape[1]);
        let data = (0..n).map(|i| self.data[i * m..(i + 1) * m].iter().sum()).collect();
        Tensor { shape: vec![n, 1], data }
    }

    /// Sums each column of an `[n, m]` tensor into an `[m]` vector.
    pub fn col_sums(&self) -> Tensor {
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        Tensor { shape: vec![m], data: out }
    }

    /// Euclidean norm of all elements viewed as one flat vector.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.numel(), other.numel());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Expands this tensor to `target` if a supported broadcast exists:
    /// scalar to anything, `[m]` across the rows of `[n, m]`, or `[n, 1]`
    /// across the columns of `[n, m]`. Returns `None` otherwise.
    pub fn broadcast_as(&self, target: &[usize]) -> Option<Tensor> {
        if self.shape == target {
            return Some(self.clone());
        }
        if self.is_scalar() {
            let numel: usize = target.iter().product();
            return Some(Tensor { shape: target.to_vec(), data: vec![self.data[0]; numel] });
        }
        if target.len() == 2 {
            let (n, m) = (target[0], target[1]);
            if self.shape == [m] {
                let mut data = Vec::with_capacity(n * m);
                for _ in 0..n {
                    data.extend_from_slice(&self.data);
                }
                return Some(Tensor { shape: target.to_vec(), data });
            }
            if self.shape == [n, 1] {
                let mut data = Vec::with_capacity(n * m);
                for i in 0..n {
                    data.extend(std::iter::repeat(self.data[i]).take(m));
                }
                return Some(Tensor { shape: target.to_vec(), data });
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_validation_rejects_mismatch_and_zero_dims() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeDataMismatch { .. })
        ));
        assert!(matches!(Tensor::new(vec![0], vec![]), Err(TensorError::ZeroDim { .. })));
    }

    #[test]
    fn matmul_and_transpose_agree_with_hand_arithmetic() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.transpose().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reductions_and_broadcasts_round_trip() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.row_sums().data(), &[6.0, 15.0]);
        assert_eq!(m.col_sums().data(), &[5.0, 7.0, 9.0]);
        let bias = Tensor::vector(&[1.0, 2.0, 3.0]).unwrap();
        let expanded = bias.broadcast_as(&[2, 3]).unwrap();
        assert_eq!(expanded.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(col.broadcast_as(&[2, 3]).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(bias.broadcast_as(&[3, 2]).is_none());
    }

    #[test]
    fn max_ties_resolve_to_lowest_index() {
        let t = Tensor::vector(&[1.0, 3.0, 3.0, 2.0]).unwrap();
        assert_eq!(t.max_with_index(), (3.0, 1));
    }
}
