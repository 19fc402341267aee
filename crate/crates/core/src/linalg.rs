//! Dense real linear algebra used by every curvature computation.
//!
//! Matrices are stored by `nalgebra` (column-major), but all operations here are
//! defined index-wise. The one convention that leaks into the rest of the crate
//! is the flattening order of [`vec`]: a `rows × cols` matrix is flattened
//! row by row, so entry `(i, j)` lands at index `i * cols + j`. With this order
//!
//! ```text
//! (A ⊗ B) · vec(X) = vec(A · X · Bᵀ)
//! ```
//!
//! which is what lets the Kronecker-factored eigenbasis be applied to a weight
//! gradient as two small matrix products.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};

use crate::error::{contract, Error, Result};

/// Flattening orders a matrix could be vectorized with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecOrder {
    RowMajor,
    ColumnMajor,
}

/// The project-wide flattening order. Weight matrices are `(d_in + 1) × d_out`,
/// so row-major order puts input index `i` in the slow position, matching the
/// left Kronecker factor `A = E[h hᵀ]`.
pub const VEC_ORDER: VecOrder = VecOrder::RowMajor;

/// Largest row or column count a materialized Kronecker product may have.
pub const MAX_KRON_DIM: usize = 4096;

/// Absolute asymmetry tolerated by the symmetric eigensolver, scaled by
/// `max(1, max |m_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A finite, non-empty real matrix.
///
/// Dereferences to the underlying [`DMatrix`] for read access; construction
/// goes through validating constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    /// Builds a matrix from row-major data.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(contract(format!("matrix shape {rows}x{cols} is empty")));
        }
        if data.len() != rows * cols {
            return Err(contract(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Self::try_from_na(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_row_slice(rows.len(), cols, &flat)
    }

    /// Validates and wraps an `nalgebra` matrix.
    pub fn try_from_na(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(contract(format!(
                "matrix shape {}x{} is empty",
                m.nrows(),
                m.ncols()
            )));
        }
        if let Some(pos) = m.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos % m.nrows(),
                pos / m.nrows()
            )));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix that is finite and non-empty by construction.
    pub(crate) fn wrap(m: DMatrix<f64>) -> Self {
        debug_assert!(m.nrows() > 0 && m.ncols() > 0);
        Self(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "matrix dimensions must be positive");
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if diag.is_empty() {
            return Err(contract("empty diagonal"));
        }
        Self::try_from_na(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn as_na(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_na(self) -> DMatrix<f64> {
        self.0
    }

    pub(crate) fn as_na_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(contract(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(Self(&self.0 * &other.0))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols() {
            return Err(contract(format!(
                "vector of length {} against {} columns",
                v.len(),
                self.cols()
            )));
        }
        Ok((&self.0 * DVector::from_column_slice(v)).as_slice().to_vec())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Largest `|m_ij - m_ji|`; zero for non-square input is meaningless, so
    /// callers check squareness first.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.rows().min(self.cols());
        let mut worst = 0.0f64;
        for j in 0..n {
            for i in (j + 1)..n {
                worst = worst.max((self.0[(i, j)] - self.0[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Deref for DenseMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Eigendecomposition `M = basis · diag(eigenvalues) · basisᵀ` of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    /// Orthogonal matrix whose columns are eigenvectors.
    pub basis: DenseMatrix,
    /// Sorted in descending order, aligned with the columns of `basis`.
    pub eigenvalues: Vec<f64>,
}

impl SymEigen {
    /// Replaces negative eigenvalues (round-off on PSD input) by zero.
    pub fn clamp_nonnegative(mut self) -> Self {
        for s in &mut self.eigenvalues {
            if *s < 0.0 {
                *s = 0.0;
            }
        }
        self
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let u = self.basis.as_na();
        let mut scaled = u.clone();
        for (j, s) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        DenseMatrix::wrap(scaled * u.transpose())
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
///
/// Each eigenvector is signed so that its largest-magnitude component is
/// positive, which makes the output independent of solver sign choices.
pub fn sym_eigendecompose(m: &DenseMatrix) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(contract(format!(
            "eigendecomposition of non-square {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(contract(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }

    let n = m.rows();
    let sym = (m.as_na() + m.as_na().transpose()) * 0.5;
    let max_iterations = 1000 * n.max(1);
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, max_iterations)
        .ok_or(Error::NoConvergence {
            iterations: max_iterations,
        })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = DMatrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col.iamax();
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.column_mut(dst).copy_from(&(col * sign));
        eigenvalues.push(eig.eigenvalues[src]);
    }
    if eigenvalues.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite eigenvalue".into()));
    }
    Ok(SymEigen {
        basis: DenseMatrix::try_from_na(basis)?,
        eigenvalues,
    })
}

/// [`sym_eigendecompose`] for inputs known to be positive semi-definite.
pub fn sym_eigendecompose_psd(m: &DenseMatrix) -> Result<SymEigen> {
    sym_eigendecompose(m).map(SymEigen::clamp_nonnegative)
}

/// Materialized Kronecker product: entry `(i·b.rows + k, j·b.cols + l)` is `a[i,j]·b[k,l]`.
pub fn kronecker_product(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    kronecker_product_limited(a, b, MAX_KRON_DIM)
}

pub fn kronecker_product_limited(
    a: &DenseMatrix,
    b: &DenseMatrix,
    max_dim: usize,
) -> Result<DenseMatrix> {
    let rows = a.rows().saturating_mul(b.rows());
    let cols = a.cols().saturating_mul(b.cols());
    let requested = rows.max(cols);
    if requested > max_dim {
        return Err(Error::Resource {
            what: "Kronecker product",
            requested,
            limit: max_dim,
        });
    }
    Ok(DenseMatrix::wrap(a.as_na().kronecker(b.as_na())))
}

/// Flattens a matrix in [`VEC_ORDER`].
pub fn vec(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(contract(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

/// `(a ⊗ b) · v` without materializing the product, via `vec(a · X · bᵀ)`
/// where `X = unvec(v, a.cols, b.cols)`.
pub fn kron_matvec(a: &DenseMatrix, b: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != a.cols() * b.cols() {
        return Err(contract(format!(
            "vector of length {} against a Kronecker product with {} columns",
            v.len(),
            a.cols() * b.cols()
        )));
    }
    let x = unvec(v, a.cols(), b.cols())?;
    Ok(vec(&(a.as_na() * x * b.as_na().transpose())))
}

/// Solves `m · x = rhs` for symmetric positive-definite `m` by Cholesky.
pub fn spd_solve(m: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if !m.is_square() || m.rows() != rhs.len() {
        return Err(contract(format!(
            "cannot solve {}x{} system against right-hand side of length {}",
            m.rows(),
            m.cols(),
            rhs.len()
        )));
    }
    let chol = m
        .as_na()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite solution".into()));
    }
    Ok(x.as_slice().to_vec())
}
