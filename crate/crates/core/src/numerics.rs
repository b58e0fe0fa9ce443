//! Small dense linear algebra used throughout the crate.
//!
//! [`Mat`] stores entries in column-major order: entry `(i, j)` lives at
//! `data[i + j * rows]`. Every serialized matrix in this crate uses the same
//! order, so `vec` is a plain copy of the storage.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("singular value decomposition did not converge")]
    SvdFailure,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix dimensions must be at least 1x1, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
}

/// Dense real matrix, column-major.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| format!("{:.6}", self[(i, j)])).collect();
            writeln!(f, "  {}", row.join(", "))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i + j * self.rows]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i + j * self.rows]
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from column-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 {
            return Err(NumericsError::EmptyShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{} entries", rows * cols),
                actual: format!("{} entries", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        Ok(Mat { rows, cols, data })
    }

    /// Row-major literal constructor, mostly for tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat::from_fn(r, c, |i, j| rows[i][j])
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Mat::from_fn(values.len(), 1, |i, _| values[i])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column-major storage.
    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            let out_col = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for k in 0..self.cols {
                let b = rhs[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let a_col = &self.data[k * self.rows..(k + 1) * self.rows];
                for (o, a) in out_col.iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * rhs` without forming the transpose.
    pub fn tr_matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.rows, rhs.rows, "tr_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, rhs.cols);
        for j in 0..rhs.cols {
            let b = rhs.col(j);
            for i in 0..self.cols {
                out[(i, j)] = dot(self.col(i), b);
            }
        }
        out
    }

    /// `self * rhsᵀ` without forming the transpose.
    pub fn matmul_tr(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "matmul_tr shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for k in 0..self.cols {
            let a_col = self.col(k);
            for j in 0..rhs.rows {
                let b = rhs[(j, k)];
                if b == 0.0 {
                    continue;
                }
                let out_col = &mut out.data[j * self.rows..(j + 1) * self.rows];
                for (o, a) in out_col.iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, rhs: &Mat) {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scaled(&self, factor: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * factor).collect() }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn col_norm(&self, j: usize) -> f64 {
        dot(self.col(j), self.col(j)).sqrt()
    }

    /// Largest absolute entry of `self - rhs`.
    pub fn max_abs_diff(&self, rhs: &Mat) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch");
        self.data.iter().zip(&rhs.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`, relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst = 0.0_f64;
        for j in 0..self.cols {
            for i in 0..j {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        Mat { rows: m.nrows(), cols: m.ncols(), data: m.as_slice().to_vec() }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Mat,
}

impl Cholesky {
    pub fn factor(a: &Mat) -> Result<Self, NumericsError> {
        let n = a.rows();
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d.is_nan() || d <= 0.0 {
                return Err(NumericsError::NotPositiveDefinite { pivot: j, value: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// Solves `L Lᵀ x = b` in place for every column of `b`.
    pub fn solve_in_place(&self, b: &mut Mat) {
        let n = self.lower.rows();
        assert_eq!(b.rows(), n);
        let l = &self.lower;
        for c in 0..b.cols() {
            let x = b.col_mut(c);
            forward_substitute(l, x);
            backward_substitute_tr(l, x);
        }
    }
}

/// Solves `L y = b` in place (`L` lower triangular, leading `b.len()` block used).
pub(crate) fn forward_substitute(l: &Mat, x: &mut [f64]) {
    for i in 0..x.len() {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ x = y` in place.
pub(crate) fn backward_substitute_tr(l: &Mat, x: &mut [f64]) {
    let n = x.len();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

fn check_square(a: &Mat) -> Result<(), NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::ShapeMismatch {
            expected: "square matrix".into(),
            actual: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    Ok(())
}

/// Solves `A X = B` for symmetric positive definite `A`.
///
/// If the plain factorization fails, one retry is made with
/// `A + λI`, `λ = 1e-10 · trace(A) / n`.
pub fn chol_spd_solve(a: &Mat, b: &Mat) -> Result<Mat, NumericsError> {
    chol_spd_solve_with(a, b, true)
}

/// [`chol_spd_solve`] with the ridge retry optional.
pub fn chol_spd_solve_with(a: &Mat, b: &Mat, ridge: bool) -> Result<Mat, NumericsError> {
    check_square(a)?;
    if b.rows() != a.rows() {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("{} rows", a.rows()),
            actual: format!("{} rows", b.rows()),
        });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let chol = match Cholesky::factor(a) {
        Ok(c) => c,
        Err(e) if !ridge => return Err(e),
        Err(_) => {
            let n = a.rows();
            let lambda = 1e-10 * a.trace() / n as f64;
            let mut ridged = a.clone();
            for i in 0..n {
                ridged[(i, i)] += lambda;
            }
            Cholesky::factor(&ridged)?
        }
    };
    let mut x = b.clone();
    chol.solve_in_place(&mut x);
    if !x.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    Ok(x)
}

/// Orthogonal polar factor `U Vᵀ` of a square matrix.
#[derive(Debug, Clone)]
pub struct PolarFactor {
    pub q: Mat,
    /// Set when the smallest singular value is below `1e-12` times the
    /// largest; the factor is then not unique.
    pub degenerate: bool,
}

pub fn polar_factor(a: &Mat) -> Result<PolarFactor, NumericsError> {
    check_square(a)?;
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let svd = nalgebra::linalg::SVD::try_new(a.to_nalgebra(), true, true, f64::EPSILON, 10_000)
        .ok_or(NumericsError::SvdFailure)?;
    let (u, vt) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(NumericsError::SvdFailure),
    };
    let q = u * vt;
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let degenerate = smin < 1e-12 * smax || smax == 0.0;
    Ok(PolarFactor { q: Mat::from_nalgebra(&q), degenerate })
}

/// Kronecker product; block `(i, j)` of the result is `a[i, j] * b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (br, bc) = b.shape();
    Mat::from_fn(a.rows() * br, a.cols() * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

/// Column-order vectorization.
pub fn vec(m: &Mat) -> Mat {
    Mat { rows: m.rows * m.cols, cols: 1, data: m.data.clone() }
}

/// Inverse of [`vec`].
pub fn unvec(v: &Mat, rows: usize, cols: usize) -> Result<Mat, NumericsError> {
    if v.cols() != 1 || v.rows() != rows * cols {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("{}x1", rows * cols),
            actual: format!("{}x{}", v.rows(), v.cols()),
        });
    }
    Mat::from_col_major(rows, cols, v.data.clone())
}
