//! Small dense real-matrix kernels.
//!
//! Row-major `f64` storage sized for the few-rows, tens-of-columns problems
//! the sampler and the learner produce. Determinants go through LU with
//! partial pivoting; Gram-Schmidt is only used where the sampler itself
//! needs the projected vectors.

use thiserror::Error;

/// Relative threshold under which a Gram-Schmidt residual is treated as zero.
const GS_ZERO_REL: f64 = 1e-10;
/// Negative Gram determinants smaller than this in magnitude are rounding noise.
const DET_CLAMP: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 80;
/// Off-diagonal entries below this fraction of the Frobenius norm count as zero.
const JACOBI_REL_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rows have unequal length")]
    Ragged,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("{what} did not converge within {sweeps} sweeps")]
    NoConvergence { what: &'static str, sweeps: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(LinalgError::Ragged);
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `A Aᵀ`, the Gram matrix of the rows.
    pub fn row_gram(&self) -> Matrix {
        let n = self.rows;
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g.data[i * n + j] = v;
                g.data[j * n + i] = v;
            }
        }
        g
    }

    /// `Aᵀ A`, the Gram matrix of the columns.
    pub fn col_gram(&self) -> Matrix {
        let p = self.cols;
        let mut g = Matrix::zeros(p, p);
        for i in 0..self.rows {
            accumulate_outer(&mut g.data, self.row(i), p);
        }
        symmetrize_upper(&mut g.data, p);
        g
    }

    pub fn frobenius_sq(&self) -> f64 {
        norm_sq(&self.data)
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                got: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, rhs.row(k), o);
                }
            }
        }
        Ok(out)
    }
}

/// Adds the upper triangle of `x xᵀ` into the `p × p` buffer `g`.
#[inline]
pub(crate) fn accumulate_outer(g: &mut [f64], x: &[f64], p: usize) {
    for a in 0..p {
        let xa = x[a];
        if xa == 0.0 {
            continue;
        }
        let row = &mut g[a * p + a..a * p + p];
        for (dst, &xb) in row.iter_mut().zip(&x[a..]) {
            *dst += xa * xb;
        }
    }
}

#[inline]
pub(crate) fn symmetrize_upper(g: &mut [f64], p: usize) {
    for a in 0..p {
        for b in 0..a {
            g[a * p + b] = g[b * p + a];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Removes from `v` its component along `u`. Zero `u` is a no-op.
#[inline]
pub fn project_out(v: &mut [f64], u: &[f64]) {
    let uu = norm_sq(u);
    if uu > 0.0 {
        let c = dot(v, u) / uu;
        axpy(-c, u, v);
    }
}

/// Component of `v` orthogonal to the span of `basis`.
///
/// The basis vectors must be mutually orthogonal; zero-norm entries are skipped.
pub fn project_orthogonal<B: AsRef<[f64]>>(v: &[f64], basis: &[B]) -> Result<Vec<f64>, LinalgError> {
    let mut out = v.to_vec();
    for u in basis {
        let u = u.as_ref();
        if u.len() != v.len() {
            return Err(LinalgError::DimensionMismatch {
                expected: v.len(),
                got: u.len(),
            });
        }
        project_out(&mut out, u);
    }
    Ok(out)
}

/// Unnormalized Gram-Schmidt over the rows.
///
/// Row `i` of the output is row `i` projected orthogonally to the span of the
/// earlier rows. Residuals that vanish (relative to the input row) are emitted
/// as exact zeros and do not join the projection basis.
pub fn gram_schmidt(rows: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(rows.rows(), rows.cols());
    let mut basis: Vec<usize> = Vec::new();
    for i in 0..rows.rows() {
        let src = rows.row(i);
        let mut v = src.to_vec();
        for &k in &basis {
            project_out(&mut v, out.row(k));
        }
        if norm_sq(&v) <= GS_ZERO_REL * GS_ZERO_REL * norm_sq(src) || norm_sq(src) == 0.0 {
            v.iter_mut().for_each(|x| *x = 0.0);
        } else {
            basis.push(i);
        }
        out.row_mut(i).copy_from_slice(&v);
    }
    out
}

/// In-place LU with partial pivoting on an `n × n` row-major buffer.
///
/// Returns the determinant. The buffer is left holding the packed factors.
pub fn lu_determinant_in_place(a: &mut [f64], n: usize) -> f64 {
    debug_assert_eq!(a.len(), n * n);
    let mut det = 1.0;
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for r in k + 1..n {
            let v = a[r * n + k].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            det = -det;
        }
        let pivot = a[k * n + k];
        det *= pivot;
        for r in k + 1..n {
            let f = a[r * n + k] / pivot;
            if f != 0.0 {
                a[r * n + k] = f;
                for c in k + 1..n {
                    a[r * n + c] -= f * a[k * n + c];
                }
            }
        }
    }
    det
}

/// Determinant of a square matrix by LU with partial pivoting.
pub fn determinant(a: &Matrix) -> Result<f64, LinalgError> {
    if a.rows() != a.cols() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.rows(),
            got: a.cols(),
        });
    }
    let mut buf = a.as_slice().to_vec();
    Ok(lu_determinant_in_place(&mut buf, a.rows()))
}

/// `det(W Wᵀ)`: the squared volume spanned by the rows of `W`.
pub fn det_gram(w: &Matrix) -> f64 {
    let mut g = w.row_gram().into_vec();
    clamp_gram_det(lu_determinant_in_place(&mut g, w.rows()))
}

#[inline]
pub(crate) fn clamp_gram_det(det: f64) -> f64 {
    if det < 0.0 && det > -DET_CLAMP {
        0.0
    } else {
        det
    }
}

/// Gauss-Jordan inverse of an `n × n` buffer with partial pivoting.
///
/// `a` is destroyed; `inv` receives the inverse. Returns `false` on an exactly
/// zero pivot.
pub fn invert_in_place(a: &mut [f64], inv: &mut [f64], n: usize) -> bool {
    inv.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for k in 0..n {
        let mut piv = k;
        let mut best = a[k * n + k].abs();
        for r in k + 1..n {
            let v = a[r * n + k].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return false;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
                inv.swap(k * n + c, piv * n + c);
            }
        }
        let p = 1.0 / a[k * n + k];
        for c in 0..n {
            a[k * n + c] *= p;
            inv[k * n + c] *= p;
        }
        for r in 0..n {
            if r == k {
                continue;
            }
            let f = a[r * n + k];
            if f != 0.0 {
                for c in 0..n {
                    a[r * n + c] -= f * a[k * n + c];
                    inv[r * n + c] -= f * inv[k * n + c];
                }
            }
        }
    }
    true
}

pub fn inverse(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: a.cols(),
        });
    }
    let mut work = a.as_slice().to_vec();
    let mut inv = vec![0.0; n * n];
    if !invert_in_place(&mut work, &mut inv, n) {
        return Err(LinalgError::Singular);
    }
    Matrix::from_vec(n, n, inv)
}

/// Singular values in descending order, via one-sided (Hestenes) Jacobi.
///
/// The returned list has `min(rows, cols)` entries.
pub fn singular_values(w: &Matrix) -> Result<Vec<f64>, LinalgError> {
    // Orthogonalize the shorter side: work rows are the vectors being rotated.
    let mut work = if w.rows() >= w.cols() {
        w.transpose()
    } else {
        w.clone()
    };
    let k = work.rows();
    let len = work.cols();
    let mut converged = k < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (alpha, beta, gamma) = {
                    let rp = work.row(p);
                    let rq = work.row(q);
                    (norm_sq(rp), norm_sq(rq), dot(rp, rq))
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for j in 0..len {
                    let xp = work.data[p * len + j];
                    let xq = work.data[q * len + j];
                    work.data[p * len + j] = c * xp - s * xq;
                    work.data[q * len + j] = s * xp + c * xq;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            what: "one-sided Jacobi SVD",
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }
    let mut sv: Vec<f64> = (0..k).map(|i| norm_sq(work.row(i)).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Row `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigen-solver for symmetric matrices.
///
/// `warm_start`, when given, is a previous set of eigenvectors (row-major, one
/// per row); the solver rotates `Vᵀ A V` instead of `A`, which converges in a
/// sweep or two when `A` has only drifted slightly.
pub fn symmetric_eigen(a: &Matrix, warm_start: Option<&Matrix>) -> Result<SymmetricEigen, LinalgError> {
    let n = a.rows();
    if n != a.cols() {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: a.cols(),
        });
    }
    // `v` holds eigenvector candidates as rows; `m = V A Vᵀ` with that layout.
    let (mut m, mut v) = match warm_start {
        Some(v0) if v0.rows() == n && v0.cols() == n => {
            let av = v0.matmul(a)?; // rows: v_k A
            let mut m = Matrix::zeros(n, n);
            for i in 0..n {
                for j in i..n {
                    let x = dot(av.row(i), v0.row(j));
                    m.data[i * n + j] = x;
                    m.data[j * n + i] = x;
                }
            }
            (m.data, v0.clone())
        }
        _ => (a.as_slice().to_vec(), Matrix::identity(n)),
    };
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_REL_TOL * scale.max(f64::MIN_POSITIVE);
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                rotated = true;
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let mrp = m[r * n + p];
                    let mrq = m[r * n + q];
                    let np = c * mrp - s * mrq;
                    let nq = s * mrp + c * mrq;
                    m[r * n + p] = np;
                    m[p * n + r] = np;
                    m[r * n + q] = nq;
                    m[q * n + r] = nq;
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                let (head, tail) = v.data.split_at_mut(q * n);
                let vp = &mut head[p * n..(p + 1) * n];
                let vq = &mut tail[..n];
                for (a, b) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            what: "Jacobi eigen-solver",
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.row_mut(dst).copy_from_slice(v.row(src));
    }
    Ok(SymmetricEigen { values, vectors })
}
