//! Dense row-major matrices, the normalized graph adjacency, the layers of
//! the CECI stack with hand-derived backward passes, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layers;
pub mod probes;

use std::fmt;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState, DecayMode};
pub use gradcheck::{grad_check, numerical_gradient, relative_error, GradCheckReport, GradCheckable};
pub use layers::{
    group_softmax, masked_mse, BatchNorm, Dropout, GcnConv, GroupSoftmax, Linear, Mode, Param, Relu,
    SlotRanges,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("edge list is not symmetric: ({0}, {1}) has no reverse")]
    NotSymmetric(usize, usize),
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("{0} backward called before forward")]
    NotForwarded(&'static str),
    #[error("{0}")]
    State(&'static str),
}

/// Row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums as a `1 × cols` matrix.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sparse `D̂^{-1/2} (A + I) D̂^{-1/2}` in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    /// Builds the normalized adjacency from a symmetric edge list.
    ///
    /// Duplicate edges and explicit self-loops are ignored; the self-loop
    /// of every node is always added.
    pub fn new(edges: &[(usize, usize)], n: usize) -> Result<Self, TensorError> {
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            for index in [u, v] {
                if index >= n {
                    return Err(TensorError::IndexOutOfRange { index, n });
                }
            }
            if u != v {
                neighbours[u].push(v);
            }
        }
        for (u, list) in neighbours.iter_mut().enumerate() {
            list.push(u);
            list.sort_unstable();
            list.dedup();
        }
        for (u, list) in neighbours.iter().enumerate() {
            for &v in list {
                if neighbours[v].binary_search(&u).is_err() {
                    return Err(TensorError::NotSymmetric(u, v));
                }
            }
        }
        let inv_sqrt_deg: Vec<f64> = neighbours
            .iter()
            .map(|l| 1.0 / (l.len() as f64).sqrt())
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (u, list) in neighbours.iter().enumerate() {
            for &v in list {
                cols.push(v);
                values.push(inv_sqrt_deg[u] * inv_sqrt_deg[v]);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            n,
            row_ptr,
            cols,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Nonzero entries of row `u` as `(column, value)` pairs, columns ascending.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[u]..self.row_ptr[u + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.row(u).find(|&(c, _)| c == v).map_or(0.0, |(_, x)| x)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for u in 0..self.n {
            for (v, x) in self.row(u) {
                m[(u, v)] = x;
            }
        }
        m
    }

    /// `Â · x`. Since `Â` is symmetric this is also `Âᵀ · x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, TensorError> {
        if x.rows() != self.n {
            return Err(TensorError::ShapeMismatch {
                op: "adjacency apply",
                left: (self.n, self.n),
                right: x.shape(),
            });
        }
        let mut out = Matrix::zeros(self.n, x.cols());
        for u in 0..self.n {
            let span = self.row_ptr[u]..self.row_ptr[u + 1];
            let out_row = out.row_mut(u);
            for (&v, &a) in self.cols[span.clone()].iter().zip(&self.values[span]) {
                for (o, &b) in out_row.iter_mut().zip(x.row(v)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }
}

/// Returns the edge list with every edge present in both directions.
pub fn symmetrize(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = edges
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_is_self_loop_one() {
        let a = NormalizedAdjacency::new(&[], 1).unwrap();
        assert_eq!(a.to_dense(), Matrix::from_rows(&[vec![1.0]]));
    }

    #[test]
    fn pair_is_all_halves() {
        let a = NormalizedAdjacency::new(&symmetrize(&[(0, 1)]), 2).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                assert!((a.get(u, v) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn star_hub_leaf_entries() {
        let a = NormalizedAdjacency::new(&symmetrize(&[(0, 1), (0, 2), (0, 3)]), 4).unwrap();
        // hub degree 4 (3 leaves + self), leaf degree 2
        let expected = 1.0 / (4.0f64 * 2.0).sqrt();
        for leaf in 1..4 {
            assert!((a.get(0, leaf) - expected).abs() < 1e-15);
            assert!((a.get(leaf, 0) - expected).abs() < 1e-15);
            assert!((a.get(leaf, leaf) - 0.5).abs() < 1e-15);
        }
        assert!((expected - 0.35355).abs() < 1e-5);
        assert!((a.get(0, 0) - 0.25).abs() < 1e-15);
        assert_eq!(a.get(1, 2), 0.0);
    }

    #[test]
    fn adjacency_errors() {
        assert_eq!(
            NormalizedAdjacency::new(&[(0, 3)], 2),
            Err(TensorError::IndexOutOfRange { index: 3, n: 2 })
        );
        assert_eq!(
            NormalizedAdjacency::new(&[(0, 1)], 2),
            Err(TensorError::NotSymmetric(0, 1))
        );
    }

    #[test]
    fn sparse_apply_matches_dense() {
        let a = NormalizedAdjacency::new(&symmetrize(&[(0, 1), (1, 2), (1, 3)]), 4).unwrap();
        let x = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![-1.0, 0.5],
            vec![3.0, 0.0],
            vec![0.25, -2.0],
        ]);
        let sparse = a.apply(&x).unwrap();
        let dense = a.to_dense().matmul(&x).unwrap();
        assert!(sparse.max_abs_diff(&dense) < 1e-15);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, Matrix::from_rows(&[vec![7.0, -1.0], vec![16.0, -1.0]]));
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert!(matches!(
            a.matmul(&a),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
