//! Dense linear-algebra kernels: symmetric eigendecomposition (cyclic
//! Jacobi), Cholesky with diagonal jitter, orthonormal completion, SPD
//! solves, and log-determinants.
//!
//! Everything here targets small dense problems (N up to a few hundred);
//! accuracy is preferred over speed.

use crate::error::{Error, Result};

/// Symmetry check tolerance, relative to the largest entry magnitude.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Jitter ladder tried by [`chol_psd_auto`], scaled by the largest entry
/// magnitude of the input.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Maximum number of Jacobi sweeps before giving up.
const MAX_JACOBI_SWEEPS: usize = 64;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Build from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        Self::from_fn(rows.len(), cols, |i, j| {
            assert_eq!(rows[i].len(), cols, "ragged rows");
            rows[i][j]
        })
    }

    /// Single-column matrix from a vector.
    pub fn from_col(v: &[f64]) -> Self {
        Self::from_fn(v.len(), 1, |i, _| v[i])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Borrow row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy column `j` out as a vector.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = out.row_mut(i);
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs = other.row(k);
                for (d, &b) in dst.iter_mut().zip(rhs.iter()) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// Quadratic form `x' * self * x` for square `self`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        dot(&self.matvec(x), x)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| s * self[(i, j)])
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] + other[(i, j)])
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] - other[(i, j)])
    }

    /// Largest entry magnitude (the max-norm).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// Largest asymmetry `|a_ij - a_ji|` over all pairs.
    pub fn max_asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(A + A') / 2`, which removes round-off asymmetry.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Invalid(format!("matrix is {}x{}, not square", a.rows(), a.cols())));
    }
    if !a.all_finite() {
        return Err(Error::Invalid("matrix has non-finite entries".into()));
    }
    let tol = SYMMETRY_TOL * (1.0 + a.max_abs());
    if a.max_asymmetry() > tol {
        return Err(Error::Invalid("matrix is not symmetric".into()));
    }
    Ok(())
}

/// Lower-triangular Cholesky factor of `a + jitter * I`.
///
/// Fails with [`Error::NotFactorizable`] when a pivot is non-positive; the
/// caller is expected to escalate `jitter` (see [`chol_psd_auto`]).
pub fn chol_psd(a: &Matrix, jitter: f64) -> Result<Matrix> {
    check_symmetric(a)?;
    if !(jitter >= 0.0) {
        return Err(Error::Invalid("jitter must be non-negative".into()));
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotFactorizable);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Ok(l)
}

/// Cholesky with the default jitter ladder; returns the factor and the
/// jitter that succeeded.
pub fn chol_psd_auto(a: &Matrix) -> Result<(Matrix, f64)> {
    let scale = a.max_abs();
    let mut last = Error::NotFactorizable;
    for &rung in JITTER_LADDER.iter() {
        let jitter = rung * scale;
        match chol_psd(a, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of an orthogonal matrix.
pub fn eigh_sym(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = m.max_abs();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }

    let off_tol = 1e-14 * scale;
    let mut converged = false;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[(p, q)].abs());
            }
        }
        if off <= off_tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= off_tol {
                    continue;
                }
                // Symmetric Schur rotation annihilating m[(p, q)].
                let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                let app = m[(p, p)];
                let aqq = m[(q, q)];
                m[(p, p)] = app - t * apq;
                m[(q, q)] = aqq + t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m[(i, p)];
                        let aiq = m[(i, q)];
                        m[(i, p)] = c * aip - s * aiq;
                        m[(p, i)] = m[(i, p)];
                        m[(i, q)] = s * aip + c * aiq;
                        m[(q, i)] = m[(i, q)];
                    }
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok((values, vectors))
}

/// Complete a unit vector `v` to an orthonormal basis of R^N.
///
/// Returns an N-by-N orthogonal matrix whose first column is `v`, built from
/// the Householder reflector that maps `v` onto the first coordinate axis.
pub fn orthonormal_completion(v: &[f64]) -> Result<Matrix> {
    let n = v.len();
    if n == 0 {
        return Err(Error::Invalid("empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("vector has non-finite entries".into()));
    }
    if (norm2(v) - 1.0).abs() > 1e-10 {
        return Err(Error::Invalid("vector is not unit length".into()));
    }
    if n == 1 {
        let mut q = Matrix::zeros(1, 1);
        q[(0, 0)] = v[0];
        return Ok(q);
    }

    // w = v + s*e1 never degenerates because ||w||^2 = 2(1 + |v_0|) >= 2.
    let s = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = v.to_vec();
    w[0] += s;
    let wsq = dot(&w, &w);
    // Q = -s (I - 2 w w' / w'w) is orthogonal with first column v.
    let mut q = Matrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        -s * delta + 2.0 * s * w[i] * w[j] / wsq
    });
    q.set_col(0, v);
    Ok(q)
}

/// Solve `a * x = b` for symmetric positive definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let l = chol_psd(a, 0.0)?;
    Ok(solve_with_chol(&l, b))
}

/// Solve `a * x = b` given the lower Cholesky factor `l` of `a`.
pub fn solve_with_chol(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    assert_eq!(b.rows(), n, "right-hand side has wrong row count");
    let m = b.cols();
    let mut x = b.clone();
    // forward: L y = b
    for j in 0..m {
        for i in 0..n {
            let mut s = x[(i, j)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / l[(i, i)];
        }
    }
    // backward: L' x = y
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = x[(i, j)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, j)];
            }
            x[(i, j)] = s / l[(i, i)];
        }
    }
    x
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &Matrix) -> Result<Matrix> {
    Ok(solve_spd(a, &Matrix::identity(a.rows()))?.symmetrized())
}

/// Log-determinant of a symmetric positive definite matrix, computed as
/// twice the log-trace of its Cholesky factor.
pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    let l = chol_psd(a, 0.0)?;
    Ok(2.0 * (0..l.rows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// Determinant of a general square matrix via LU with partial pivoting.
/// Returns 0 when a pivot vanishes.
pub fn det(a: &Matrix) -> f64 {
    assert!(a.is_square());
    let n = a.rows();
    let mut m = a.clone();
    let mut sign = 1.0f64;
    let mut result = 1.0f64;
    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if m[(i, k)].abs() > m[(piv, k)].abs() {
                piv = i;
            }
        }
        if m[(piv, k)] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            sign = -sign;
        }
        result *= m[(k, k)];
        for i in (k + 1)..n {
            let f = m[(i, k)] / m[(k, k)];
            for j in k..n {
                m[(i, j)] -= f * m[(k, j)];
            }
        }
    }
    sign * result
}
